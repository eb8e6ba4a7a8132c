"""Zero-shot Android malware detection from API call graphs.

Pipeline: call listings -> API call graphs -> VGAE graph embeddings ->
Siamese similarity network -> support-set classification -> metrics.
"""

from .errors import (ConfigError, DependencyError, DroidZeroError, ValidationError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DependencyError", "DroidZeroError", "ValidationError", "__version__"]
