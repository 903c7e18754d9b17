"""conceptseg: adaptive per-image concept discovery over pixel embeddings.

Pipeline: learnable prototypes are updated per image by attention against
pixel-level embeddings, pixels are assigned to concepts by cosine
similarity, and the update network is trained with a differentiable
graph-modularity objective. Includes classical clustering baselines,
unsupervised concept classifiers, Hungarian-matching evaluation, a binary
feature-file container, and a CLI.
"""

__version__ = "0.1.0"
