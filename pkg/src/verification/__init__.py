from .client import VerificationClient, VerificationResponse, verify_remote
from .mock_server import MockVerificationServer

__all__ = ["MockVerificationServer", "VerificationClient", "VerificationResponse", "verify_remote"]
