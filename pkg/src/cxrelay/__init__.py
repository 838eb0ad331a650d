"""Edge-to-server chest X-ray screening relay.

Subpackages cover image preprocessing, scan storage, a small CNN engine,
classification metrics, occlusion saliency, model compression, the binary
wire protocol, a deterministic link simulator, and the edge/server halves
of the relay.
"""

__version__ = "0.1.0"
