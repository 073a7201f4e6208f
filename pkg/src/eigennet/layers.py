"""Eigenbasis-factorized layers.

Every weight matrix is stored as thin orthonormal factors Q (m x r) and
P (n x r) with a length-r scaling vector, r = min(m, n), so the effective
map is W = Q diag(scales) P^T. The forward path applies the factors in
order and never materializes W; ``reconstruct_weight`` exists for tests,
checkpoint inspection and the dense-equivalence oracle.
"""

import numpy as np

from . import autograd as ag
from .errors import DimensionError, FactorShapeError
from .kernels import conv_output_extent


def init_orthonormal(m, r, seed):
    """Orthonormal m x r matrix from a seeded Gaussian draw.

    Deterministic for a fixed seed; the sign convention (positive diagonal
    of the QR triangular factor) removes the column-sign ambiguity.
    """
    if m < r:
        raise FactorShapeError(f"cannot build {r} orthonormal columns in dimension {m}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, r))
    q, rr = np.linalg.qr(a)
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(q * signs)


class EigenLinear:
    """Dense layer parameterized as Q diag(scales) P^T plus a free bias."""

    def __init__(self, in_width, out_width, seed, bias=True, name="layer"):
        m, n = out_width, in_width
        r = min(m, n)
        ss = np.random.SeedSequence(seed)
        seed_q, seed_p = ss.generate_state(2)
        self.m, self.n, self.r = m, n, r
        self.Q = ag.parameter(init_orthonormal(m, r, seed_q), name=f"{name}.Q")
        self.scales = ag.parameter(np.ones(r), name=f"{name}.lambda")
        self.P = ag.parameter(init_orthonormal(n, r, seed_p), name=f"{name}.P")
        self.bias = ag.parameter(np.zeros(m), name=f"{name}.bias") if bias else None
        self.name = name

    def parameters(self):
        """(tensor, decays) pairs; the bias is exempt from weight decay."""
        out = [(self.Q, True), (self.scales, True), (self.P, True)]
        if self.bias is not None:
            out.append((self.bias, False))
        return out

    def forward(self, x):
        """z = Q (diag(scales) (P^T x)) + bias for x of shape n x batch."""
        if x.shape[0] != self.n:
            raise DimensionError(f"{self.name}: input width {x.shape[0]}, expected {self.n}")
        z = ag.matmul(ag.scale_columns(self.Q, self.scales), ag.matmul(ag.transpose(self.P), x))
        if self.bias is not None:
            z = ag.add_bias(z, self.bias)
        return z

    def reconstruct_weight(self):
        """Materialized W = Q diag(scales) P^T (off the training path)."""
        return ag.matmul(ag.scale_columns(self.Q, self.scales), ag.transpose(self.P))

    def orth_penalty(self):
        return ag.add(ag.gram_orth_penalty(self.Q), ag.gram_orth_penalty(self.P))

    def gram_drift(self):
        """Largest Frobenius deviation of either factor's Gram matrix from identity."""
        drift = 0.0
        for f in (self.Q.data, self.P.data):
            dev = f.T @ f - np.eye(f.shape[1])
            drift = max(drift, float(np.linalg.norm(dev)))
        return drift

    def effective_dof(self):
        """Raw factor entries minus the orthonormality constraints; equals m*n."""
        m, n, r = self.m, self.n, self.r
        return m * r + n * r + r - r * (r + 1)

    def raw_param_count(self):
        count = self.m * self.r + self.n * self.r + self.r
        if self.bias is not None:
            count += self.m
        return count


class EigenConv2d:
    """Convolution as im2col followed by a factorized linear map.

    The inner factor has m = out_channels and n = in_channels*kh*kw, matching
    the patch-matrix layout produced by im2col.
    """

    def __init__(self, in_channels, out_channels, kh, kw, stride, pad, seed, bias=True, name="conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kh, kw
        self.stride, self.pad = stride, pad
        self.inner = EigenLinear(in_channels * kh * kw, out_channels, seed, bias=bias, name=name)
        self.name = name

    # factor access mirrors EigenLinear so trainers treat both uniformly
    @property
    def Q(self):
        return self.inner.Q

    @property
    def scales(self):
        return self.inner.scales

    @property
    def P(self):
        return self.inner.P

    @property
    def bias(self):
        return self.inner.bias

    def parameters(self):
        return self.inner.parameters()

    def forward(self, x):
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise DimensionError(f"{self.name}: {c} input channels, expected {self.in_channels}")
        oh = conv_output_extent(h, self.kh, self.stride, self.pad)
        ow = conv_output_extent(w, self.kw, self.stride, self.pad)
        cols = ag.im2col(x, self.kh, self.kw, self.stride, self.pad)
        z = self.inner.forward(ag.transpose(cols))  # out_ch x (b*oh*ow)
        z = ag.reshape(z, (self.out_channels, b, oh, ow))
        return ag.permute(z, (1, 0, 2, 3))

    def reconstruct_weight(self):
        return self.inner.reconstruct_weight()

    def orth_penalty(self):
        return self.inner.orth_penalty()

    def gram_drift(self):
        return self.inner.gram_drift()

    def effective_dof(self):
        return self.inner.effective_dof()

    def raw_param_count(self):
        return self.inner.raw_param_count()


class LocalHead:
    """Per-block classifier: spatial mean pool (for feature maps) + dense map."""

    def __init__(self, in_width, num_classes, seed, name="head"):
        rng = np.random.default_rng(seed)
        std = np.sqrt(2.0 / (in_width + num_classes))
        self.W = ag.parameter(rng.standard_normal((num_classes, in_width)) * std, name=f"{name}.W")
        self.b = ag.parameter(np.zeros(num_classes), name=f"{name}.b")
        self.in_width = in_width
        self.num_classes = num_classes
        self.name = name

    def parameters(self):
        return [(self.W, True), (self.b, False)]

    def forward(self, h):
        """Logits of shape batch x classes; feature maps are mean-pooled first."""
        if len(h.shape) == 4:
            features = ag.transpose(ag.mean_hw(h))  # channels x batch
        elif len(h.shape) == 2:
            features = h  # width x batch
        else:
            raise DimensionError(f"{self.name}: expected a vector batch or feature map, got shape {h.shape}")
        if features.shape[0] != self.in_width:
            raise DimensionError(f"{self.name}: feature width {features.shape[0]}, expected {self.in_width}")
        logits = ag.add_bias(ag.matmul(self.W, features), self.b)
        return ag.transpose(logits)

    def raw_param_count(self):
        return self.W.data.size + self.b.data.size
