"""Weight-space embeddings of NeRFs across MLP, tri-plane and hash-table architectures.

Pure numpy: a small reverse-mode autodiff kernel, the three NeRF families,
parameter-graph construction, a graph meta-network encoder, an
embedding-conditioned decoder, framework training and downstream evaluation.
"""

__version__ = "0.1.0"
