"""Homomorphic CNN inference toolkit.

Train a small convolutional network on MNIST, replace its activations with
low-degree Chebyshev polynomial approximations, and run inference on images
encrypted under a from-scratch RNS implementation of a scale-invariant
(Fan-Vercauteren-style) somewhat-homomorphic encryption scheme. The server
computing the network never sees plaintext pixels, model activations, or
logits; only the key holder can decrypt the result.
"""

__version__ = "0.1.0"
