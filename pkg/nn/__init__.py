"""
nn package: a minimal dense network substrate with exact analytic gradients.

Key parts
---------
- layers:     LayerSpec wiring plus forward/backward for Linear, ReLU, Softmax, Embedding,
              MeanPool and single-head SelfAttention
- params:     ParamStore (named parameters + AdamW moments) and adam_update
- losses:     softmax, cross-entropy, categorical KL, logistic helpers
- checkpoint: bit-exact binary checkpoint I/O ("CPLN" format)
- gradcheck:  central finite differences shared by tests and the check-grads command
"""

from .layers import LayerKind, LayerSpec, backward, forward, init_graph
from .params import ParamStore, adam_update

__all__ = ["LayerKind", "LayerSpec", "ParamStore", "adam_update", "backward", "forward", "init_graph"]
