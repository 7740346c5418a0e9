"""Shared builders for micro models used across the test suite."""
import numpy as np
import pytest

from protostudent.encoder import Encoder, EncoderConfig
from protostudent.heads import HEAD_KINDS, StudentModel, make_head
from protostudent.replacement import PrototypeStore
from protostudent.tensor import Tensor


MICRO_CONFIG = EncoderConfig(in_channels=2, blocks=((3, 2, 1),), input_size=(4, 4))


def micro_student(kind: str, seed: int = 0, k: int = 4, classes: int = 2,
                  config: EncoderConfig = MICRO_CONFIG,
                  zero_bias: bool = False) -> StudentModel:
    """Tiny student with randomized parameters (the default classifier
    init is zero, which would make gradient and relevance tests vacuous)."""
    rng = np.random.default_rng([seed, 99])
    enc = Encoder(config, seed=seed)
    if zero_bias:
        for b in enc.biases:
            b.data[...] = 0.0
    c = config.feature_shape()[0]
    head = make_head(kind, k, classes, c, seed=seed)
    head.w.data = rng.uniform(0.2, 1.0, size=head.w.shape)
    if zero_bias:
        head.b.data[...] = 0.0
    else:
        head.b.data = rng.uniform(-0.1, 0.1, size=head.b.shape)
    images = rng.random((k, config.in_channels, *config.input_size))
    labels = np.arange(k) % classes
    # importance weights spaced apart: all-equal weights sit exactly on
    # the mask's tie set, where one-sided finite differences are undefined
    m = rng.permutation(np.linspace(0.5, 2.0, k))
    store = PrototypeStore(ids=np.arange(k), images=images,
                           labels=labels.astype(np.int64),
                           m_weights=Tensor(m, requires_grad=True))
    head.prototype_refs = store
    student = StudentModel(encoder=enc, head=head, store=store, class_count=classes)
    student.refresh_store_features()
    return student


@pytest.fixture(params=HEAD_KINDS)
def head_kind(request):
    return request.param
