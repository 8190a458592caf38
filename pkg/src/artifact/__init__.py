"""Feature inversion for small frozen ReLU CNNs with executable guarantees.

The backward path pulls a channel-selective seed through the encoder's exact
adjoint, renormalizing at every downsampling boundary; everything downstream
(class-directional interference analysis, covariance-volume channel
selection, OOD indicators, causal ablation, attention-head visualization)
consumes the resulting pixel-space bases.
"""

__version__ = "0.1.0"
