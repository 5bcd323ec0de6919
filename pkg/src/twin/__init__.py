"""Two-stage lifelong-behavior retrieval with split target attention."""
from .attention import AttentionConfig, TwinParams, build_equivalent_dense, raw_mhta_forward, twin_forward
from .retrieval import GsuKind, cp_gsu_retrieve, hit_rate, oracle_topk
from .training import auc, gauc

__version__ = "0.1.0"

__all__ = ["AttentionConfig", "TwinParams", "build_equivalent_dense", "raw_mhta_forward", "twin_forward",
           "GsuKind", "cp_gsu_retrieve", "hit_rate", "oracle_topk", "auc", "gauc", "__version__"]
