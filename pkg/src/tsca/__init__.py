"""Triset alignment engine.

Builds three discrete distributions per image (visual patches, candidate
compositions, candidate primitives), aligns them with bidirectional
conditional transport plus cycle-consistency and primitive-decoupling
penalties, trains a small compositional recognizer end to end on synthetic
data, and evaluates with the seen/unseen calibration-bias protocol,
optionally restricting open-world candidates with a transport-based
feasibility filter.
"""

from tsca.backend import backend_name

__version__ = "0.1.0"

__all__ = ["__version__", "backend_name"]
