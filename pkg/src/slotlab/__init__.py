"""Object-centric representation learning lab: a 2D multi-object perturbation
DGP, a slot-attention encoder with entropy-minimized matching, weak-supervision
training losses, disentanglement metrics, and vector-encoder baselines — all on
a small numpy reverse-mode autodiff core.
"""

__version__ = "0.1.0"
