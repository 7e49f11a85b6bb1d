"""Device-conditioned neural ISP.

Light imports only; the torch-backed network lives in
:mod:`polyisp.nnisp.model` and is imported explicitly where needed.
"""

from polyisp.nnisp.config import FeatureToggles, ModelConfig, XcitConfig
from polyisp.nnisp.state import NetworkState

__all__ = ["FeatureToggles", "ModelConfig", "XcitConfig", "NetworkState"]
