"""Flow-based intrusion detection and evidence preservation for MQTT networks."""

from .errors import ForensicsError

__version__ = "0.1.0"

__all__ = ["ForensicsError", "__version__"]
