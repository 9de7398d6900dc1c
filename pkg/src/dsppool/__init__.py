"""Discriminative subspace pooling of feature sequences.

Summarizes a temporally ordered feature sequence as an orthonormal set of
hyperplanes separating the sequence from an adversarially perturbed copy
of itself, and classifies the resulting subspaces with a projection
metric kernel SVM.
"""

from .data import Dataset, FeatureSequence, SynthSpec, generate
from .kernel_svm import KernelParams, gram, proj_kernel, svm_predict, svm_train
from .perturb import (
    Perturbation,
    SoftmaxModel,
    alt_noise,
    compute_uap,
    fooling_rate,
    train_softmax,
)
from .pool import (
    DspParams,
    SequenceBags,
    SubspaceDescriptor,
    build_segments,
    compute_delta,
    dsp_cost,
    dsp_grad,
    grad_wrt_input,
    pool_sequence,
)
from .rcg import RcgParams, RcgTrace, minimize
from .stiefel import StiefelPoint, TangentVector, project_tangent, retract, transport

__version__ = "0.1.0"
