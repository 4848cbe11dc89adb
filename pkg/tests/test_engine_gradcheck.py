"""Finite-difference gradient verification for every differentiable op."""

import numpy as np

from pointdrape.engine import gradcheck

TOL = 1e-4


def test_registry_covers_every_op():
    names = {name for name, _ in gradcheck.CASES}
    assert len(names) == len(gradcheck.CASES), "duplicate case names"
    # Every op with a backward rule must appear here; keep this list in sync.
    required = {
        "add", "sub", "mul", "scale", "matmul", "affine", "reshape", "concat",
        "conv2d", "conv2d_transpose", "batchnorm_train", "batchnorm_train_4d",
        "batchnorm_eval", "relu", "leaky_relu", "softplus", "reduce_sum",
        "reduce_sum_axis", "reduce_mean", "abs", "gather_rows", "slice_rows",
        "select0", "bilinear_sample", "rigid_rotate", "normalize_rows",
    }
    assert required <= names


def test_all_ops_within_tolerance():
    results = gradcheck.run_all(seed=0, instances=10)
    failures = {k: v for k, v in results.items() if not (v < TOL)}
    assert not failures, f"gradient mismatches: {failures}"


def test_gradcheck_detects_a_wrong_gradient():
    """Sanity check on the checker itself: a corrupted function must be caught."""
    from pointdrape.engine import ops
    from pointdrape.engine.tensor import Tensor

    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 3)), dtype=np.float64, requires_grad=True)

    err_good = gradcheck.check_case(lambda: ops.reduce_sum(ops.mul(x, x)), [x])
    assert err_good < TOL

    # Tape pass sees x*x (grad 2x), numeric passes see sum(x) (grad 1):
    # the checker must flag the disagreement.
    state = {"first": True}

    def inconsistent():
        if state["first"]:
            state["first"] = False
            return ops.reduce_sum(ops.mul(x, x))
        return ops.reduce_sum(x)

    err_bad = gradcheck.check_case(inconsistent, [x])
    assert err_bad > TOL
