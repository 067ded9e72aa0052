import os
import subprocess
import sys

import numpy as np
import pytest

from fadecast.encoders import (
    CHANNELS,
    Embedding,
    Model,
    NormStats,
    OpEncoderConfig,
    OperationalWindow,
    SimEncoderConfig,
    normalize,
    normalize_rows,
    normalize_rows_backward,
)
from fadecast.errors import (
    ConfigError,
    ContractError,
    DegenerateEmbeddingError,
    StaleCacheError,
)

TINY_SIM = SimEncoderConfig(input_len=16, layers=((3, 3, 2), (4, 3, 2)), embed_dim=5)
TINY_OP = OpEncoderConfig(chem_vocab=("<unk>", "LFP", "NMC"), chem_dim=2,
                          attn_dim=6, n_heads=2, embed_dim=5)


def tiny_model(seed=9):
    return Model.build(TINY_SIM, TINY_OP, seed=seed)


def random_window(rng, length, chemistry="LFP"):
    feats = np.column_stack([
        rng.uniform(0.8, 1.0, length),
        rng.normal(0, 1, length),
        rng.normal(0, 1, length),
        rng.normal(0, 1, length),
        rng.normal(0, 1, length),
    ])
    return OperationalWindow(features=feats, cycles=np.arange(length),
                             chemistry=chemistry,
                             initial_capacity_ah=rng.uniform(1, 3))


# --- normalize -----------------------------------------------------------


def test_normalize_345():
    e = Embedding(values=np.array([3.0, 4.0, 0.0, 0.0]))
    n = normalize(e)
    assert np.allclose(n.values, [0.6, 0.8, 0.0, 0.0], atol=1e-15)
    assert n.normalized


def test_normalize_idempotent():
    e = normalize(Embedding(values=np.array([1.0, 2.0, -2.0])))
    again = normalize(e)
    assert np.abs(again.values - e.values).max() <= 1e-12


def test_normalize_zero_vector_errors():
    with pytest.raises(DegenerateEmbeddingError):
        normalize(Embedding(values=np.zeros(4)))


def test_normalize_scale_invariant_direction():
    rng = np.random.default_rng(0)
    v = rng.normal(0, 1, 8)
    base = normalize(Embedding(values=v)).values
    for lam in (1e-6, 0.5, 3.0, 1e6):
        scaled = normalize(Embedding(values=lam * v)).values
        assert np.abs(scaled - base).max() <= 1e-12


# --- sim encoder ----------------------------------------------------------


def test_zero_weights_give_zero_embedding():
    m = tiny_model()
    for name in m.weights.names():
        if name.startswith("sim/"):
            m.weights.tensors[name][:] = 0.0
    z, _ = m.encode_sim_batch(np.linspace(1.0, 0.7, 16))
    assert np.all(z == 0.0)
    with pytest.raises(DegenerateEmbeddingError):
        normalize(Embedding(values=z[0]))


def test_sim_encoder_deterministic_across_runs():
    m = tiny_model(seed=4)
    x = np.linspace(1.0, 0.72, 16)
    first = m.encode_sim_batch(x)[0]
    for _ in range(5):
        assert np.array_equal(m.encode_sim_batch(x)[0], first)


def test_sim_encoder_deterministic_across_thread_counts():
    script = (
        "import numpy as np\n"
        "from fadecast.encoders import Model, SimEncoderConfig, OpEncoderConfig\n"
        "m = Model.build(SimEncoderConfig(input_len=64, layers=((8, 5, 2),),"
        " embed_dim=16), OpEncoderConfig(chem_dim=2, attn_dim=8, n_heads=2,"
        " embed_dim=16), seed=3)\n"
        "z, _ = m.encode_sim_batch(np.linspace(1.0, 0.7, 64))\n"
        "print(z.tobytes().hex())\n"
    )
    outs = []
    for threads in ("1", "4"):
        env = dict(os.environ, OPENBLAS_NUM_THREADS=threads,
                   OMP_NUM_THREADS=threads)
        res = subprocess.run([sys.executable, "-c", script], env=env,
                             capture_output=True, text=True, check=True)
        outs.append(res.stdout.strip())
    assert outs[0] == outs[1]


def test_sim_encoder_hand_traceable_degenerate_config():
    # Width-1 identity kernel, mean pool, all-ones projection: constant
    # input c maps every output coordinate to ReLU(c).
    cfg = SimEncoderConfig(input_len=8, layers=((1, 1, 1),), embed_dim=3,
                           input_mode="raw")
    op_cfg = OpEncoderConfig(chem_vocab=("<unk>",), chem_dim=2, attn_dim=6,
                             n_heads=2, embed_dim=3)
    m = Model.build(cfg, op_cfg, seed=0)
    m.weights.tensors["sim/conv0_w"][:] = 1.0
    m.weights.tensors["sim/conv0_b"][:] = 0.0
    m.weights.tensors["sim/proj_w"][:] = 1.0
    m.weights.tensors["sim/proj_b"][:] = 0.0
    for c in (0.75, 1.2):
        z, _ = m.encode_sim_batch(np.full(8, c))
        assert np.allclose(z[0], max(c, 0.0), atol=1e-15)


def test_sim_encoder_rejects_wrong_length():
    m = tiny_model()
    with pytest.raises(ConfigError):
        m.encode_sim_batch(np.ones(17))


# --- op encoder -----------------------------------------------------------


def test_op_padding_invariance_bit_identical():
    rng = np.random.default_rng(1)
    m = tiny_model()
    w = random_window(rng, 9)
    padded = w.padded(14)
    z1, _ = m.encode_op_batch([w])
    z2, _ = m.encode_op_batch([padded])
    assert np.array_equal(z1, z2)


def test_op_single_step_attention_is_identity():
    rng = np.random.default_rng(2)
    m = tiny_model()
    w = random_window(rng, 1)
    z, cache = m.encode_op_batch([w])
    assert np.allclose(cache["attn"], 1.0, atol=0)
    # pooling over one step is the step itself
    mixed = cache["heads"] @ m.weights["op/wo"] + m.weights["op/bo"]
    assert np.array_equal(cache["context"][0, :TINY_OP.attn_dim], mixed[0, 0])


def test_op_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    m = tiny_model()
    z, cache = m.encode_op_batch([random_window(rng, 12)])
    sums = cache["attn"].sum(axis=-1)
    assert np.abs(sums - 1.0).max() <= 1e-9


def test_op_unknown_chemistry_maps_to_reserved_token():
    rng = np.random.default_rng(4)
    m = tiny_model()
    w = random_window(rng, 6, chemistry="NCA")  # not in vocab
    w2 = OperationalWindow(features=w.features, cycles=w.cycles,
                           chemistry="<unk>", initial_capacity_ah=w.initial_capacity_ah)
    assert np.array_equal(m.encode_op_batch([w])[0], m.encode_op_batch([w2])[0])


def test_op_empty_window_rejected():
    with pytest.raises(ContractError):
        OperationalWindow(features=np.zeros((0, len(CHANNELS))),
                          cycles=np.zeros(0), chemistry="LFP",
                          initial_capacity_ah=2.0)


def test_op_matches_straight_line_reimplementation():
    rng = np.random.default_rng(8)
    m = tiny_model(seed=17)
    w = random_window(rng, 7, chemistry="NMC")
    z, _ = m.encode_op_batch([w])

    cfg, ten = m.op_cfg, m.weights
    x = m.norm.apply(w.trimmed()[0])
    static = np.concatenate([ten["op/chem_emb"][cfg.chem_index(w.chemistry)],
                             [m.norm.apply_ic(w.initial_capacity_ah)]])
    T, F = x.shape
    v_rows = []
    for t in range(T):
        u = np.concatenate([x[t], static])
        logits = ten["op/gate_w"] @ u + ten["op/gate_b"]
        g = np.exp(logits - logits.max())
        g = g / g.sum()
        v = np.zeros(cfg.attn_dim)
        for f in range(F):
            v = v + g[f] * (x[t, f] * ten["op/lift_w"][f] + ten["op/lift_b"][f])
        v_rows.append(v)
    vmat = np.stack(v_rows)
    q_all, k_all, v_all = vmat @ ten["op/wq"], vmat @ ten["op/wk"], vmat @ ten["op/wv"]
    dk = cfg.attn_dim // cfg.n_heads
    rows = []
    for t in range(T):
        per_head = []
        for h in range(cfg.n_heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = np.array([q_all[t, sl] @ k_all[s, sl] for s in range(T)])
            scores = scores / np.sqrt(dk)
            a = np.exp(scores - scores.max())
            a = a / a.sum()
            out = np.zeros(dk)
            for s in range(T):
                out = out + a[s] * v_all[s, sl]
            per_head.append(out)
        rows.append(np.concatenate(per_head))
    mixed = np.stack(rows) @ ten["op/wo"] + ten["op/bo"]
    pooled = mixed.mean(axis=0)
    expected = ten["op/head_w"] @ np.concatenate([pooled, static]) + ten["op/head_b"]
    assert np.abs(z[0] - expected).max() <= 1e-10


# --- backward -------------------------------------------------------------


def full_fd_check(model, X, wins, A, B, eps=1e-6, rel_tol=1e-4):
    """Central finite differences of a linear-in-embeddings loss."""
    def loss():
        zs, _ = model.encode_sim_batch(X)
        zo, _ = model.encode_op_batch(wins)
        return float(np.sum(A * zs) + np.sum(B * zo))

    zs, cs = model.encode_sim_batch(X)
    zo, co = model.encode_op_batch(wins)
    grads = model.backward(cs, A, co, B)
    worst = {}
    for name in sorted(grads):
        ten = model.weights[name]
        flat = ten.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss()
            flat[i] = orig - eps
            lm = loss()
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * eps)
        fd = fd.reshape(ten.shape)
        denom = max(np.abs(fd).max(), 1e-10)
        worst[name] = np.abs(np.asarray(grads[name]) - fd).max() / denom
    assert max(worst.values()) < rel_tol, worst
    return grads


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    m = tiny_model(seed=9)
    X = rng.uniform(0.7, 1.0, (2, 16))
    wins = [random_window(rng, 7, "LFP"), random_window(rng, 7, "NMC")]
    A = rng.normal(0, 1, (2, 5))
    B = rng.normal(0, 1, (2, 5))
    full_fd_check(m, X, wins, A, B)


def test_backward_deterministic_and_unused_rows_zero():
    rng = np.random.default_rng(5)
    m = tiny_model()
    X = rng.uniform(0.7, 1.0, (2, 16))
    wins = [random_window(rng, 5, "LFP"), random_window(rng, 5, "LFP")]
    A = rng.normal(0, 1, (2, 5))
    B = rng.normal(0, 1, (2, 5))

    def run():
        zs, cs = m.encode_sim_batch(X)
        zo, co = m.encode_op_batch(wins)
        return m.backward(cs, A, co, B)

    g1, g2 = run(), run()
    for name in g1:
        assert np.array_equal(g1[name], g2[name])
    # NMC (index 2) never appears: its embedding row gets exactly zero grad
    assert np.all(g1["op/chem_emb"][2] == 0.0)
    assert np.any(g1["op/chem_emb"][1] != 0.0)


def test_backward_padding_invariant_gradients():
    rng = np.random.default_rng(6)
    m = tiny_model()
    w = random_window(rng, 6)
    A = rng.normal(0, 1, (1, 5))
    X = rng.uniform(0.7, 1.0, (1, 16))

    def grads_for(window):
        zs, cs = m.encode_sim_batch(X)
        zo, co = m.encode_op_batch([window])
        return m.backward(cs, A, co, np.ones((1, 5)))

    g1 = grads_for(w)
    g2 = grads_for(w.padded(11))
    for name in g1:
        assert np.array_equal(g1[name], g2[name])


def test_backward_stale_cache_rejected():
    rng = np.random.default_rng(7)
    m = tiny_model()
    X = rng.uniform(0.7, 1.0, (1, 16))
    zs, cs = m.encode_sim_batch(X)
    zo, co = m.encode_op_batch([random_window(rng, 4)])
    m.weights.bump()
    with pytest.raises(StaleCacheError):
        m.backward(cs, np.ones((1, 5)), co, np.ones((1, 5)))


def test_normalize_rows_backward_matches_fd():
    rng = np.random.default_rng(11)
    z = rng.normal(0, 1, (3, 6))
    dp = rng.normal(0, 1, (3, 6))
    p = normalize_rows(z)
    dz = normalize_rows_backward(z, p, dp)
    eps = 1e-7
    fd = np.zeros_like(z)
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            orig = z[i, j]
            z[i, j] = orig + eps
            lp = float(np.sum(normalize_rows(z) * dp))
            z[i, j] = orig - eps
            lm = float(np.sum(normalize_rows(z) * dp))
            z[i, j] = orig
            fd[i, j] = (lp - lm) / (2 * eps)
    assert np.abs(fd - dz).max() / np.abs(fd).max() < 1e-6


# --- batching and config --------------------------------------------------


def test_mixed_length_batch_rejected():
    rng = np.random.default_rng(12)
    m = tiny_model()
    with pytest.raises(ConfigError):
        m.encode_op_batch([random_window(rng, 4), random_window(rng, 6)])


def test_config_validation():
    with pytest.raises(ConfigError):
        SimEncoderConfig(input_len=4, layers=((0, 3, 1),), embed_dim=2)
    with pytest.raises(ConfigError):
        OpEncoderConfig(attn_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        OpEncoderConfig(chem_vocab=("LFP",))
    with pytest.raises(ConfigError):
        Model.build(TINY_SIM, OpEncoderConfig(chem_dim=2, attn_dim=6,
                                              n_heads=2, embed_dim=7), seed=0)


def test_checkpoint_round_trip_exact(tmp_path):
    m = tiny_model(seed=23)
    raw = m.to_bytes()
    path = str(tmp_path / "model.fck")
    m.save(path)
    loaded = Model.load(path)
    assert loaded.to_bytes() == raw
    assert loaded.sim_cfg == m.sim_cfg
    assert loaded.op_cfg == m.op_cfg
    x = np.linspace(1.0, 0.8, 16)
    assert np.array_equal(loaded.encode_sim_batch(x)[0],
                          m.encode_sim_batch(x)[0])


def test_norm_stats_pin_soh_and_validate():
    stats = NormStats(channel_mu=np.arange(5.0), channel_sd=np.full(5, 2.0),
                      ic_mu=1.0, ic_sd=0.5)
    assert stats.channel_mu[0] == 0.0
    assert stats.channel_sd[0] == 1.0
    with pytest.raises(ConfigError):
        NormStats(channel_mu=np.zeros(5), channel_sd=np.zeros(5))
    d = stats.to_dict()
    assert NormStats.from_dict(d).to_dict() == d
