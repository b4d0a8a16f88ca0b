import json

import numpy as np
import pytest

from sobdiff import systems as S
from sobdiff.buffer import Buffer, NormStats, TrajectoryRecord, build_chunk_table
from sobdiff.interplay import record_from_result
from sobdiff.sensitivity import chunk_jacobian, closed_loop_from_matrices


@pytest.fixture(scope="module")
def pend_buffer(pendulum_solution):
    spec, task, res = pendulum_solution
    buf = Buffer(spec)
    rec = record_from_result(spec, task, res, "cold")
    buf.insert(rec)
    # a second, perturbed record keeps the normalisation non-degenerate
    rec2 = TrajectoryRecord(task, rec.X * 1.01, rec.U * 0.99, rec.K, rec.A, rec.B, rec.cost, rec.iters, "warmstart")
    buf.insert(rec2)
    return buf


def fake_record(spec, rng, T=None):
    T = T or spec.T
    task = S.sample_task(spec, rng)
    n_x, n_u = spec.n_x, spec.n_u
    return TrajectoryRecord(task, rng.normal(size=(T + 1, n_x)), rng.normal(size=(T, n_u)),
                            rng.normal(size=(T, n_u, n_x)), rng.normal(size=(T, n_x, n_x)),
                            rng.normal(size=(T, n_x, n_u)), float(rng.uniform(1, 10)), 3, "cold")


def test_container_semantics():
    spec = S.make_system("pendulum")
    buf = Buffer(spec)
    buf.insert(fake_record(spec, np.random.default_rng(0)))
    assert len(buf) == 1
    buf.reset()
    assert len(buf) == 0
    with pytest.raises(ValueError):
        buf.fit_norm()


def test_sampling_never_references_reset_records():
    spec = S.make_system("pendulum", T=40)
    rng = np.random.default_rng(1)
    buf = Buffer(spec)
    old = [fake_record(spec, rng) for _ in range(3)]
    buf.extend(old)
    buf.reset()
    new = [fake_record(spec, rng) for _ in range(2)]
    buf.extend(new)
    for _ in range(200):
        c = buf.sample_chunk(rng, 8, 2)
        assert c.record in (0, 1)
        assert buf.records[c.record] is new[c.record]


def test_norm_maps_into_unit_box_and_roundtrip(pend_buffer):
    norm = pend_buffer.fit_norm()
    for r in pend_buffer.records:
        a = norm.norm_action(r.U)
        assert a.min() >= -1 - 1e-12 and a.max() <= 1 + 1e-12
        np.testing.assert_allclose(norm.denorm_action(a), r.U, atol=1e-12)
    assert np.all(norm.obs.scale > 0)
    again = NormStats.from_dict(json.loads(json.dumps(norm.to_dict())))
    np.testing.assert_array_equal(again.action.scale, norm.action.scale)


def test_constant_dimension_is_floored():
    spec = S.make_system("pendulum")
    buf = Buffer(spec)
    rec = fake_record(spec, np.random.default_rng(2))
    rec.U[:] = 3.0
    buf.insert(rec)
    norm = buf.fit_norm()
    assert norm.action.scale[0] == 1e-6
    assert np.all(np.isfinite(norm.norm_action(rec.U)))


def test_sample_chunk_invariants(pend_buffer):
    rng = np.random.default_rng(3)
    spec = pend_buffer.spec
    for _ in range(10_000 // 50):
        c = pend_buffer.sample_chunk(rng, 16, 2)
        np.testing.assert_array_equal(c.tau0[:2], c.a_hist)
        assert c.tau0.shape == (16, spec.n_a)
        assert 1 <= c.t <= spec.T - 16


def test_chunk_angles_in_window():
    spec = S.make_system("double_pendulum", T=30)
    rng = np.random.default_rng(6)
    rec = fake_record(spec, rng)
    # several windings so the shift is non-trivial
    rec.X[:, :2] = np.cumsum(rng.normal(0.0, 2.0, size=(spec.T + 1, 2)), axis=0)
    buf = Buffer(spec)
    buf.insert(rec)
    T_h, T_o = 8, 2
    for t in range(T_o - 1, spec.T - T_h + 1):
        c = buf.make_chunk(0, t, T_h, T_o)
        d = c.x_hist - rec.X[t - T_o + 1:t + 1]
        for i, centre in spec.angle_windows:
            assert centre - np.pi <= c.x_hist[-1, i] < centre + np.pi
            np.testing.assert_allclose(d[:, i] / (2 * np.pi), np.round(d[0, i] / (2 * np.pi)), atol=1e-9)
        non_angle = [j for j in range(spec.n_x) if j not in dict(spec.angle_windows)]
        np.testing.assert_array_equal(d[:, non_angle], 0.0)


def test_sample_chunk_deterministic(pend_buffer):
    a = [pend_buffer.sample_chunk(np.random.default_rng(5), 8, 1).t for _ in range(3)]
    b = [pend_buffer.sample_chunk(np.random.default_rng(5), 8, 1).t for _ in range(3)]
    assert a == b


def test_chunk_target_matches_recomputation(pend_buffer):
    rng = np.random.default_rng(4)
    rec = pend_buffer.records[0]
    jac = closed_loop_from_matrices(rec.A, rec.B, rec.K, "u")
    for _ in range(20):
        c = pend_buffer.sample_chunk(rng, 8, 2)
        if c.record != 0:
            continue
        a0 = c.t - 2
        np.testing.assert_allclose(c.J_target, chunk_jacobian(jac, a0, 8, 2, lag=1))


def test_first_window_pads_controls():
    spec = S.make_system("pendulum", T=30)
    rng = np.random.default_rng(6)
    buf = Buffer(spec)
    buf.insert(fake_record(spec, rng, 30))
    c = buf.make_chunk(0, 0, 8, 1)
    assert np.all(c.tau0[0] == 0) and np.all(c.o_hist[0, spec.n_x:] == 0)
    assert np.all(c.J_target[:spec.n_u] == 0)
    np.testing.assert_array_equal(c.tau0[1:], buf.records[0].U[:7])
    with pytest.raises(ValueError):
        buf.make_chunk(0, 23, 8, 1)


def test_normalized_jacobian_chain_rule(pend_buffer):
    """FD of the normalised closed-loop map equals S_a^-1 J S_x."""
    spec = pend_buffer.spec
    norm = pend_buffer.fit_norm()
    rec = pend_buffer.records[0]
    t1, T_h = 20, 6
    J = pend_buffer.make_chunk(0, t1 + 1, T_h, 1).J_target  # a=u: control rows start at t1
    Jn = norm.norm_jacobian(J, T_h, 1)
    sx = norm.obs.scale[:spec.n_x]
    ox = norm.obs.offset[:spec.n_x]

    def f(xn):
        x = xn * sx + ox
        acts = []
        for s in range(t1, t1 + T_h):
            u = rec.U[s] + rec.K[s] @ (x - rec.X[s]) if s >= t1 + 1 else rec.U[s] * 1.0
            acts.append(norm.norm_action(u))
            if s >= t1 + 1:
                x = rec.A[s] @ x + rec.B[s] @ u  # linear model of the record
        return np.concatenate(acts)

    # row 0 is u_{t1}, which precedes x_{t1+1}: zero; remaining rows follow the linear closed loop
    xn0 = (rec.X[t1 + 1] - ox) / sx
    h = 1e-6
    cols = []
    for i in range(spec.n_x):
        e = np.zeros(spec.n_x)
        e[i] = h
        cols.append((f(xn0 + e) - f(xn0 - e)) / (2 * h))
    Jf = np.array(cols).T
    np.testing.assert_allclose(Jn, Jf, rtol=1e-6, atol=1e-8)


def test_table_matches_chunks(pend_buffer):
    norm = pend_buffer.fit_norm()
    tab = build_chunk_table(pend_buffer, norm, 8, 1)
    c = pend_buffer.make_chunk(1, 5, 8, 1)
    j = tab.offsets[1] + 5
    np.testing.assert_allclose(tab.tau0[j], norm.norm_action(c.tau0))
    assert tab.counts.sum() == tab.tau0.shape[0]


def test_epoch_accounting():
    spec = S.make_system("pendulum")
    rng = np.random.default_rng(7)
    buf = Buffer(spec)
    buf.extend([fake_record(spec, rng) for _ in range(3)])
    assert buf.epoch_size(32) == int(np.ceil(3 * (spec.T - 32) / 32))
    assert buf.epoch_size_direct() == 3 * spec.T


def test_save_load_roundtrip(tmp_path, pend_buffer):
    p = tmp_path / "buf.ndjson"
    pend_buffer.save(p)
    back = Buffer.load(p, pend_buffer.spec)
    assert len(back) == len(pend_buffer)
    for a, b in zip(back.records, pend_buffer.records):
        assert a == b
    p2 = tmp_path / "again.ndjson"
    back.save(p2)
    assert p.read_bytes() == p2.read_bytes()
    first = json.loads(p.read_text().splitlines()[0])
    assert set(first) == {"xi", "X", "U", "K", "A", "B", "cost", "iters", "source"}


def test_load_rejects_truncated_and_malformed(tmp_path, pend_buffer):
    p = tmp_path / "buf.ndjson"
    pend_buffer.save(p)
    text = p.read_text()
    (tmp_path / "trunc.ndjson").write_text(text[:-50])
    with pytest.raises(ValueError, match="line 2"):
        Buffer.load(tmp_path / "trunc.ndjson", pend_buffer.spec)
    lines = text.splitlines()
    (tmp_path / "bad.ndjson").write_text(lines[0] + "\n{not json}\n")
    with pytest.raises(ValueError, match="line 2"):
        Buffer.load(tmp_path / "bad.ndjson", pend_buffer.spec)


def test_record_validation():
    spec = S.make_system("pendulum", T=10)
    rec = fake_record(spec, np.random.default_rng(8), 10)
    with pytest.raises(ValueError):
        TrajectoryRecord(rec.xi, rec.X[:-1], rec.U, rec.K, rec.A, rec.B, 1.0, 1)
    with pytest.raises(ValueError):
        TrajectoryRecord(rec.xi, rec.X, rec.U, rec.K, rec.A, rec.B, float("nan"), 1)
