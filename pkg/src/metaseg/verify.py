"""Full f64 verification battery behind the `verify` CLI command.

Each check returns (name, passed, detail). The battery covers gradient
correctness of every op and of the whole episode pipeline, closed-form
fidelity of the ridge solver against an iterative oracle, sampler protocol
invariants over many episodes, and checkpoint persistence.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np

from .autodiff import (
    AdamState,
    BatchNormState,
    Tape,
    Tensor,
    absolute,
    add,
    batchnorm2d,
    conv2d,
    div,
    exp,
    global_avg_pool,
    grad_check,
    l2_normalize_channels,
    leaky_relu,
    matmul,
    max_pool2x2,
    mean,
    mul,
    replicate_upsample,
    softmax_cross_entropy,
    softmax_probs,
    spd_solve,
    sub,
    sum_,
    transpose,
    upsample_bilinear,
    using_dtype,
)
from .checkpoint import load_checkpoint, pack_state, save_checkpoint, unpack_state
from .embed import EmbedConfig, build_embedding, embed_forward
from .episodes import SynthConfig, gen_synthetic, sample_episode, split_classes
from .heads import RidgeHead
from .pipeline import head_logits
from .trainer import meta_loss, trainable_tensors
from .util import derive_seed

Check = tuple[str, bool, str]


def _op_cases(rng):
    mk = lambda *s: Tensor(rng.normal(size=s).astype(np.float64), dtype=np.float64)  # noqa: E731
    w_conv, w_pool, w_gap = mk(2, 3, 5, 5), mk(1, 2, 2, 2), mk(2, 3, 1, 1)
    w_bn, w_l2, w_up, w_lk = mk(2, 3, 4, 4), mk(1, 2, 4, 4), mk(1, 2, 6, 9), mk(4, 4)
    return {
        "conv2d": (
            lambda ts: sum_(mul(conv2d(ts[0], ts[1], ts[2], 1, 2, 2), w_conv)),
            [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
        ),
        "max_pool2x2": (lambda ts: sum_(mul(max_pool2x2(ts[0]), w_pool)), [rng.normal(size=(1, 2, 4, 3))]),
        "global_avg_pool": (lambda ts: sum_(mul(global_avg_pool(ts[0]), w_gap)), [rng.normal(size=(2, 3, 3, 3))]),
        "batchnorm2d": (
            lambda ts: sum_(
                mul(batchnorm2d(ts[0], ts[1], ts[2], BatchNormState.create(3, np.float64), "train"), w_bn)
            ),
            [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)],
        ),
        "l2_normalize": (lambda ts: sum_(mul(l2_normalize_channels(ts[0]), w_l2)), [rng.normal(size=(1, 2, 4, 4))]),
        "leaky_relu": (lambda ts: sum_(mul(leaky_relu(ts[0]), w_lk)), [rng.normal(size=(4, 4)) + 0.1]),
        "replicate_upsample": (
            lambda ts: sum_(mul(replicate_upsample(ts[0], 2, 2), w_pool)),
            [rng.normal(size=(1, 2, 1, 1))],
        ),
        "upsample_bilinear": (lambda ts: sum_(mul(upsample_bilinear(ts[0], 6, 9), w_up)), [rng.normal(size=(1, 2, 3, 3))]),
        "spd_solve": (
            lambda ts: sum_(spd_solve(ts[0], ts[1])),
            [(lambda m: m @ m.T + 5 * np.eye(5))(rng.normal(size=(5, 5))), rng.normal(size=(5, 3))],
        ),
        "softmax_cross_entropy": (
            lambda ts: softmax_cross_entropy(ts[0], np.array([0, 2, 1, 3])),
            [rng.normal(size=(4, 4))],
        ),
        "elementwise": (
            lambda ts: mean(div(exp(mul(ts[0], Tensor(0.3))), add(absolute(ts[1]), Tensor(1.0)))),
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
        ),
        "matmul": (
            lambda ts: sum_(mul(sub(matmul(ts[0], ts[1]), Tensor(0.5)), matmul(ts[0], ts[1]))),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        ),
    }


def check_op_gradients(seeds=(0, 1, 2, 3, 4), rtol=1e-4) -> Check:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _op_cases(rng).items():
            res = grad_check(fn, inputs, rtol=rtol, h=1e-4, seed=seed)
            worst = max(worst, max(res.max_rel_err))
            if not res.passed:
                return ("op gradients", False, f"{name} seed {seed}: {res}")
    return ("op gradients", True, f"{len(seeds)} seeds x 12 ops, worst rel err {worst:.2e}")


def check_pipeline_gradient(rtol=1e-4) -> Check:
    rng = np.random.default_rng(17)
    k = 2
    support_imgs = rng.random((2, 3, 8, 8))
    query_imgs = rng.random((2, 3, 8, 8))
    s_labels = rng.integers(0, k + 1, size=8)
    s_labels[: k + 1] = np.arange(k + 1)
    q_labels = rng.integers(0, k + 1, size=8)
    worst = {}
    with using_dtype("f64"):
        params = build_embedding(EmbedConfig.micro(4), seed=1)
        for name, t in params.tensors.items():
            if name.endswith(".b") or name.endswith(".beta"):
                t.data = t.data + rng.uniform(0.05, 0.3, t.data.shape) * rng.choice([-1.0, 1.0], t.data.shape)
        names = list(params.tensors)
        for kind in ("ridge", "prototype", "convstep"):

            def loss_fn(ts):
                for n2, t in zip(names, ts[:-3]):
                    params.tensors[n2] = t
                head = RidgeHead(log_lambda=ts[-3], alpha=ts[-2], beta=ts[-1])
                sf = embed_forward(params, Tensor(support_imgs, dtype=np.float64), "eval")
                qf = embed_forward(params, Tensor(query_imgs, dtype=np.float64), "eval")
                return meta_loss(head_logits(head, kind, sf, s_labels, qf, k + 1), q_labels)

            inputs = [params.tensors[n].data for n in names] + [np.array(0.1), np.array(1.2), np.array(-0.05)]
            res = grad_check(loss_fn, inputs, rtol=rtol, h=1e-4, seed=23)
            worst[kind] = max(res.max_rel_err)
            if not res.passed:
                return ("pipeline gradient", False, f"{kind}: {res}")
    detail = ", ".join(f"{k2} {v:.2e}" for k2, v in worst.items())
    return ("pipeline gradient", True, f"d(loss)/d(params, log_lambda, alpha, beta): {detail}")


def _gd_oracle(x, y, lam, tol=1e-12, max_steps=200_000):
    xtx = x.T @ x
    xty = x.T @ y
    lip = 2.0 * (np.linalg.norm(x, 2) ** 2 + lam)
    lr = 0.9 / lip
    w = np.zeros((x.shape[1], y.shape[1]))
    for _ in range(max_steps):
        step = lr * 2.0 * (xtx @ w - xty + lam * w)
        w -= step
        if np.abs(step).max() < tol:
            break
    return w


def check_ridge_oracle(num_combos=50) -> Check:
    rng = np.random.default_rng(4242)
    worst_gd = worst_agree = worst_resid = 0.0
    lams = [0.1, 1.0, 10.0]
    with using_dtype("f64"):
        for i in range(num_combos):
            n = int(rng.integers(3, 21))
            c = int(rng.integers(3, 21))
            lam = lams[i % len(lams)]
            x = rng.normal(size=(n, c))
            m = int(rng.integers(2, 5))
            y = rng.normal(size=(n, m))
            xt_t = Tensor(x, dtype=np.float64)
            yt = Tensor(y, dtype=np.float64)
            primal = spd_solve(
                add(matmul(transpose(xt_t), xt_t), mul(Tensor(lam), Tensor(np.eye(c)))),
                matmul(transpose(xt_t), yt),
            ).data
            dual = matmul(
                transpose(xt_t),
                spd_solve(add(matmul(xt_t, transpose(xt_t)), mul(Tensor(lam), Tensor(np.eye(n)))), yt),
            ).data
            worst_agree = max(worst_agree, np.abs(primal - dual).max())
            w_gd = _gd_oracle(x, y, lam)
            worst_gd = max(worst_gd, np.abs(primal - w_gd).max())
            resid = np.abs((x.T @ x + lam * np.eye(c)) @ primal - x.T @ y).max()
            worst_resid = max(worst_resid, resid / max(1.0, np.abs(x.T @ y).max()))
    ok = worst_gd <= 1e-6 and worst_agree <= 1e-8 and worst_resid <= 1e-9
    return (
        "ridge closed form",
        ok,
        f"{num_combos} combos: |W-W_gd| {worst_gd:.2e}, primal-dual {worst_agree:.2e}, residual {worst_resid:.2e}",
    )


def check_sampler_invariants(num_episodes=10_000) -> Check:
    ds = split_classes(gen_synthetic(SynthConfig(num_classes=14, images_per_class=12, seed=7)), [3, 5, 7, 11])
    novel = ds.novel_classes
    k, n, q = 2, 3, 2
    for i in range(num_episodes):
        ep = sample_episode(ds, "train", k, n, q, derive_seed("verify-sampler", i))
        if len(ep.support) != n * k or len(ep.query) != q * k:
            return ("sampler invariants", False, f"episode {i}: wrong cardinalities")
        if len(set(ep.record_ids)) != len(ep.record_ids):
            return ("sampler invariants", False, f"episode {i}: repeated image")
        for rid in ep.record_ids:
            if ds.records[rid].present & novel:
                return ("sampler invariants", False, f"episode {i}: novel-class contamination")
        labels = np.unique(np.stack([m for _, m in ep.support + ep.query]))
        if labels.min() < 0 or labels.max() > k:
            return ("sampler invariants", False, f"episode {i}: label outside 0..{k}")
    a = sample_episode(ds, "train", k, n, q, 123456)
    b = sample_episode(ds, "train", k, n, q, 123456)
    same = a.record_ids == b.record_ids and all(
        (xa[0] == xb[0]).all() and (xa[1] == xb[1]).all()
        for xa, xb in zip(a.support + a.query, b.support + b.query)
    )
    if not same:
        return ("sampler invariants", False, "same seed produced different episodes")
    return ("sampler invariants", True, f"{num_episodes} episodes: cardinality, labels, split, reproducibility")


def check_checkpoint_roundtrip() -> Check:
    with using_dtype("f32"):
        params = build_embedding(EmbedConfig.micro(4), seed=5)
        head = RidgeHead.create()
        adam = AdamState.create(trainable_tensors(params, head, "ridge"))
        ckpt = pack_state({"train": {"head": "ridge"}}, EmbedConfig.micro(4), params, head, adam, 3, 9)
    with tempfile.TemporaryDirectory() as d:
        p1 = Path(d) / "a.ckpt"
        p2 = Path(d) / "b.ckpt"
        save_checkpoint(p1, ckpt)
        save_checkpoint(p2, load_checkpoint(p1))
        if p1.read_bytes() != p2.read_bytes():
            return ("checkpoint roundtrip", False, "save-load-save not byte-identical")
        _, params2, head2, adam2, epochs = unpack_state(load_checkpoint(p1))
        if epochs != 3:
            return ("checkpoint roundtrip", False, "epoch counter lost")
        for name, t in params.tensors.items():
            if params2.tensors[name].data.tobytes() != t.data.tobytes():
                return ("checkpoint roundtrip", False, f"tensor {name} not bit-identical")
    return ("checkpoint roundtrip", True, "save -> load -> save byte-identical; tensors bit-exact")


def check_autodiff_misc() -> Check:
    with using_dtype("f64"):
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(1, 2, 9, 9)))
        kern = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(np.zeros(2))
        inflated = np.zeros((2, 2, 5, 5))
        inflated[:, :, ::2, ::2] = kern.data
        d1 = conv2d(x, kern, b, 1, 2, 2).data
        d2 = conv2d(x, Tensor(inflated), b, 1, 2, 1).data
        if np.abs(d1 - d2).max() > 1e-6:
            return ("autodiff invariants", False, "dilation zero-inflation identity broken")
        probs = softmax_probs(Tensor(rng.normal(scale=25, size=(8, 5))))
        if np.abs(probs.sum(axis=1) - 1).max() > 1e-6:
            return ("autodiff invariants", False, "softmax rows do not sum to 1")

        def run_backward():
            with Tape() as tape:
                a = tape.watch(Tensor(rng_state.copy()))
                loss = mean(mul(matmul(a, transpose(a)), Tensor(0.5)))
            return tape.backward(loss)[a]

        rng_state = rng.normal(size=(6, 6))
        if run_backward().tobytes() != run_backward().tobytes():
            return ("autodiff invariants", False, "backward is not deterministic")

        # negative control: a deliberately broken gradient must be flagged
        def broken(ts):
            out = mul(ts[0], ts[0])
            return sum_(add(Tensor(out.data), ts[0]))

        res = grad_check(broken, [np.array([1.0, 2.0])], rtol=1e-4)
        if res.passed:
            return ("autodiff invariants", False, "broken gradient was not flagged")
    return ("autodiff invariants", True, "dilation identity, softmax sums, determinism, negative control")


def run_verify(fast: bool = False) -> list[Check]:
    """Run the battery; `fast` shrinks the sampler scan for development."""
    t0 = time.perf_counter()
    checks = [
        check_op_gradients(),
        check_pipeline_gradient(),
        check_ridge_oracle(),
        check_sampler_invariants(1000 if fast else 10_000),
        check_checkpoint_roundtrip(),
        check_autodiff_misc(),
    ]
    total = time.perf_counter() - t0
    checks.append(("wall clock", total < 600, f"{total:.1f}s (budget 600s)"))
    return checks
