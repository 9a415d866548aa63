"""Encrypted distributed Lasso: leveled SIMD simulator, Chebyshev soft threshold,
multi-server ADMM protocols and a data-driven predictive control case study."""
from .simd_he import (BootstrapHeadroomError, CapacityError, Evaluator, HEError,
                      LevelExhaustedError, PackedCiphertext, ProtocolDesyncError,
                      SchemeParams, ShapeError)
from .cheb import ChebyshevPoly, SoftThresholdSpec, eval_ps_encrypted, interpolate, soft_threshold
from .admm import (LassoProblem, admm_central, admm_distributed, admm_hetero, fista_oracle,
                   lemma1_bound)
from .protocol import (NetworkSim, ProtocolAbort, ProtocolTranscript, run_p1, step_p2)

__all__ = [
    "BootstrapHeadroomError", "CapacityError", "Evaluator", "HEError", "LevelExhaustedError",
    "PackedCiphertext", "ProtocolDesyncError", "SchemeParams", "ShapeError", "ChebyshevPoly",
    "SoftThresholdSpec", "eval_ps_encrypted", "interpolate", "soft_threshold", "LassoProblem",
    "admm_central", "admm_distributed", "admm_hetero", "fista_oracle", "lemma1_bound",
    "NetworkSim", "ProtocolAbort", "ProtocolTranscript", "run_p1", "step_p2",
]
