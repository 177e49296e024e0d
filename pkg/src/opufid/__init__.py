"""Simulated optical-fiber PUF: backscatter synthesis, binary IDs and identification protocols."""
from .crp_db import CrpDatabase, enroll, lookup
from .decision_stats import hamming, threshold, ThresholdPolicy, p_false_negative, p_false_positive
from .fiber_model import Fiber, FiberChain, concatenate, reflectivity_profile, synthesize_fiber
from .ofdr import Challenge, acquire, quantize
from .signature import DigitalSignature, intersect, make_signature_direct, select_window

__version__ = "0.1.0"
