"""Three-party secure inference for binarized neural networks over Z_2^l."""
from .compiler import CompiledPlan, CompileError, RangeBudgetError, compile, rewrite_graph
from .inference import secure_inference
from .model import (FC, BatchNorm, Conv, DWConv, Flatten, FusedSignMaxPool, MaxPool, ModelGraph, Output,
                    PWConv, ReLU, Sign, parameter_count)
from .modelio import load_model, save_model
from .oracle import plaintext_forward
from .ring import FixedPoint, Ring

__all__ = [
    "FC", "BatchNorm", "CompileError", "CompiledPlan", "Conv", "DWConv", "FixedPoint", "Flatten",
    "FusedSignMaxPool", "MaxPool", "ModelGraph", "Output", "PWConv", "RangeBudgetError", "ReLU", "Ring",
    "Sign", "compile", "load_model", "parameter_count", "plaintext_forward", "rewrite_graph",
    "save_model", "secure_inference",
]
