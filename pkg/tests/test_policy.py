import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceapg.autodiff import Tape
from ceapg.dynamics import make_env
from ceapg.harness import relative_error
from ceapg.policy import (PolicyArch, default_arch, forward, init_params, load_policy, pack,
                          param_count, save_policy, unpack)

ACRO = PolicyArch(4, 4, (4, 16, 16, 1), 4.0)


def numpy_forward(arch, theta, h, obs):
    """Reference GRU + MLP in plain numpy."""
    p = unpack(arch, theta)
    W, U, b = p["W"], p["U"], p["b"]
    sig = lambda x: 1 / (1 + np.exp(-x))
    z = sig(W[0] @ obs + U[0] @ h + b[0])
    r = sig(W[1] @ obs + U[1] @ h + b[1])
    cand = np.tanh(W[2] @ obs + U[2] @ (r * h) + b[2])
    h_next = (1 - z) * h + z * cand
    x = h_next
    n_layers = len(arch.fc_layers) - 1
    for i in range(n_layers):
        x = p[f"fc{i}.W"] @ x + p[f"fc{i}.b"]
        x = np.tanh(x) if i == n_layers - 1 else np.maximum(x, 0)
    return arch.u_max * x[0], h_next


def test_param_counts():
    assert param_count(ACRO) == 477
    assert param_count(PolicyArch(1, 1, (1, 1))) == 11
    # 108 GRU + 369 FC
    assert param_count(ACRO) == 3 * (16 + 16 + 4) + (4 * 16 + 16) + (16 * 16 + 16) + (16 + 1)
    by_formula = 3 * (48 + 36 + 6) + (6 * 32 + 32) + (32 * 32 + 32) + (32 + 1)
    assert by_formula == 1583
    assert param_count(PolicyArch(8, 6, (6, 32, 32, 1))) == by_formula
    assert param_count(default_arch(make_env("double_cartpole"))) == by_formula
    assert param_count(default_arch(make_env("cartpole"))) == 477


def test_arch_validation():
    with pytest.raises(ValueError):
        PolicyArch(4, 4, (5, 16, 1))
    with pytest.raises(ValueError):
        PolicyArch(4, 4, (4, 16, 2))
    with pytest.raises(ValueError):
        PolicyArch(4, 4, (4, 1), u_max=0.0)


def test_init():
    rng = np.random.default_rng(0)
    theta = init_params(ACRO, rng)
    assert np.array_equal(theta, init_params(ACRO, np.random.default_rng(0)))
    p = unpack(ACRO, theta)
    assert np.all(np.abs(p["W"]) <= 1 / math.sqrt(4))
    assert np.all(np.abs(p["U"]) <= 1 / math.sqrt(4))
    assert np.all(p["b"] == 0)
    for i, fan_in in enumerate((4, 16, 16)):
        assert np.all(np.abs(p[f"fc{i}.W"]) <= 1 / math.sqrt(fan_in))
        assert np.all(p[f"fc{i}.b"] == 0)
    assert np.count_nonzero(theta) > 0.9 * (theta.size - 3 * 4 - 16 - 16 - 1)


def test_zero_params():
    a, h = forward(ACRO, np.zeros(477), np.zeros(4), np.array([0.3, -2.0, 1.0, 5.0]))
    assert a == 0.0
    assert np.all(h == 0)


def test_matches_numpy_reference():
    rng = np.random.default_rng(1)
    for arch in (ACRO, PolicyArch(8, 6, (6, 32, 32, 1), 10.0), PolicyArch(1, 1, (1, 1))):
        for _ in range(20):
            theta = rng.normal(0, 1, param_count(arch))
            h = rng.uniform(-1, 1, arch.gru_hidden)
            obs = rng.normal(0, 2, arch.obs_dim)
            a, hn = forward(arch, theta, h, obs)
            ra, rh = numpy_forward(arch, theta, h, obs)
            assert a == pytest.approx(ra, rel=1e-12, abs=1e-14)
            assert np.allclose(hn, rh, rtol=1e-12, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 20))
def test_action_bounded_and_hidden_contracts(seed, scale):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0, scale, 477)
    h = rng.uniform(-3, 3, 4)
    a, hn = forward(ACRO, theta, h, rng.normal(0, scale, 4))
    assert abs(a) <= ACRO.u_max
    assert np.max(np.abs(hn)) <= max(np.max(np.abs(h)), 1.0) + 1e-12


def test_action_gradient_matches_fd():
    rng = np.random.default_rng(2)
    P = 477
    for _ in range(50):
        theta = init_params(ACRO, rng) + rng.normal(0, 0.2, P) * (rng.random(P) < 0.3)
        h = rng.uniform(-0.5, 0.5, 4)
        obs = rng.normal(0, 1, 4)
        t = Tape()
        th_ids = np.array([t.leaf(v) for v in theta])
        a, _ = forward(ACRO, th_ids, np.array([t.leaf(v) for v in h]),
                       np.array([t.leaf(v) for v in obs]), tape=t)
        grad = t.backward(a)[th_ids]
        idx = rng.choice(P, 10, replace=False)
        fd = []
        for i in idx:
            e = np.zeros(P)
            e[i] = 1e-6 * max(1, abs(theta[i]))
            fd.append((forward(ACRO, theta + e, h, obs)[0] - forward(ACRO, theta - e, h, obs)[0])
                      / (2 * e[i]))
        assert relative_error(grad[idx], np.array(fd)).max() < 1e-6


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(ACRO, np.zeros(476), np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        forward(ACRO, np.zeros(477), np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        forward(ACRO, np.zeros(477), np.zeros(4), np.zeros(8))


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(3)
    for arch in (ACRO, PolicyArch(8, 6, (6, 32, 32, 1)), PolicyArch(2, 3, (3, 5, 1))):
        theta = rng.normal(size=param_count(arch))
        assert pack(arch, unpack(arch, theta)).tobytes() == theta.tobytes()


def test_packing_order():
    theta = np.arange(477, dtype=float)
    p = unpack(ACRO, theta)
    assert p["W"][0, 0, 0] == 0 and p["U"][0, 0, 0] == 48 and p["b"][0, 0] == 96
    assert p["fc0.W"][0, 0] == 108 and p["fc0.b"][0] == 108 + 64
    assert p["fc2.b"][0] == 476


def test_save_load_bit_exact(tmp_path):
    arch = PolicyArch(8, 6, (6, 32, 32, 1), 10.0)
    theta = np.random.default_rng(4).normal(size=param_count(arch)) * 1e3
    path = tmp_path / "p.txt"
    save_policy(path, arch, theta)
    arch2, theta2 = load_policy(path)
    assert arch2 == arch
    assert theta2.tobytes() == theta.tobytes()
    lines = path.read_text().splitlines()
    assert lines[0] == "obs_dim=8 gru_hidden=6 fc_layers=6,32,32,1 u_max=10.0"
    assert len(lines) == 1 + param_count(arch)


def test_load_rejects_bad_files(tmp_path):
    path = tmp_path / "p.txt"
    save_policy(path, ACRO, np.zeros(477))
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ValueError):
        load_policy(path)
    path.write_text("")
    with pytest.raises(ValueError):
        load_policy(path)
