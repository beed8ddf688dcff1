import numpy as np
import pytest

from adafgrad import (
    ModelDims,
    PrototypeBuffer,
    SlideFeatures,
    accumulate_task,
    init_params,
)

MICRO_DIMS = ModelDims(d_vis=3, d_model=2, d_attn=2, c_text=3, c_total=4)


def random_slide(rng, *, n_r=None, k=1, d_vis=3, global_class=0, task_index=0,
                 slide_id="s"):
    n_r = int(rng.integers(1, 5)) if n_r is None else n_r
    return SlideFeatures(
        slide_id=slide_id, task_index=task_index,
        class_in_task=global_class, global_class=global_class,
        regions=rng.normal(size=(n_r, d_vis)),
        patches=rng.normal(size=(n_r, k * k, d_vis)),
    )


def unit_rows(rng, n, width):
    m = rng.normal(size=(n, width))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def micro_prototypes(rng, n_cls=4, n_neg=2, width=3):
    buf = PrototypeBuffer()
    cls = [(i, v) for i, v in enumerate(unit_rows(rng, n_cls, width))]
    neg = [(i, v) for i, v in enumerate(unit_rows(rng, n_neg, width))]
    return accumulate_task(buf, cls, neg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_params():
    return init_params(MICRO_DIMS, 7)
