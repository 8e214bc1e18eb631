import dataclasses
import struct

import numpy as np
import pytest

from tseg import engine as E
from tseg import network as net
from tseg.errors import ContractError, DimensionError, FormatError

TABLE = {"1": 1248, "2": 4272, "3": 4272, "4": 9376, "5": 14304, "6": 14304, "7": 7011,
         "SC1": 2352, "SC2": 2352, "SC3": 2352}


@pytest.fixture(scope="module")
def params():
    return net.build_network(seed=0)


def _row_by_hand(cfg):
    """Table rows from the layer definitions: conv k*k*cin*cout + cout, BN 4 per channel."""
    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    bn = cfg.bn_param_accounting
    rows = {}
    mono_in, paired_in = 1, 2
    for level in (1, 2, 3):
        rows[str(level)] = (4 * (conv(mono_in, 4) + bn * 4) + 2 * (conv(paired_in, 8) + bn * 8)
                            + conv(4 if level == 1 else 16, 16) + bn * 16)
        mono_in, paired_in = 4, 8
    rows["4"] = conv(48, 16) + bn * 16 + conv(16, 16) + bn * 16
    per_level = conv(16, 16) + bn * 16 + conv(16, 16) + bn * 16
    rows["5"] = rows["6"] = 3 * per_level
    rows["7"] = 3 * (conv(16, 16) + conv(16, 1, 1))
    for sc in ("SC1", "SC2", "SC3"):
        rows[sc] = 3 * conv(48, 16, 1)
    return rows


def test_parameter_rows_match_table(params):
    rows, total = net.count_parameters(params)
    got = {r.layer: r.total for r in rows}
    assert got == TABLE
    assert got == _row_by_hand(params.config)
    assert total == 61843


def test_running_statistics_are_counted_but_not_trained(params):
    rows, _ = net.count_parameters(params)
    assert sum(r.running for r in rows) == sum(p.size for n, p in params.items() if not p.trainable)
    for name, p in params.items():
        assert p.trainable == (not name.endswith(("running_mean", "running_var")))


def test_tripled_bottleneck_changes_total():
    cfg = net.NetworkConfig(bottleneck_kernels=48)
    _, total = net.count_parameters(net.build_network(cfg))
    assert total != 61843 and total > 61843


def test_dimension_chain(params, rng):
    trace = []
    out = net.forward(params, rng.standard_normal((2, 4, 200, 168)).astype(np.float32), trace=trace)
    sizes = dict(trace)
    assert sizes["fe.level1"] == (100, 84)
    assert sizes["fe.level2"] == (50, 42)
    assert sizes["fe.level3"] == (25, 21)
    assert sizes["bottleneck"] == (25, 21)
    assert [sizes[f"branch.level{i}"] for i in (1, 2, 3)] == [(50, 42), (100, 84), (200, 168)]
    for y in out:
        assert y.shape == (2, 1, 200, 168)
        assert (y.data > 0).all() and (y.data < 1).all()


def test_skip_tensors_have_48_channels(params, rng):
    _, skips = net.forward(params, rng.standard_normal((1, 4, 200, 168)).astype(np.float32),
                           return_skips=True)
    assert [s.shape for s in skips] == [(1, 48, 200, 168), (1, 48, 100, 84), (1, 48, 50, 42)]


def test_wrong_input_shape(params):
    with pytest.raises(DimensionError):
        net.forward(params, np.zeros((1, 4, 100, 100), np.float32))
    with pytest.raises(DimensionError):
        net.forward(params, np.zeros((1, 3, 200, 168), np.float32))


def test_he_uniform_bounds_and_seeding():
    a = net.build_network(seed=3)
    b = net.build_network(seed=3)
    c = net.build_network(seed=4)
    for name, p in a.items():
        assert p.data.tobytes() == b[name].data.tobytes()
        if name.endswith(".w"):
            fan_in = int(np.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= net.he_uniform_limit(fan_in)
            assert not np.array_equal(p.data, c[name].data)
        elif name.endswith((".b", "beta", "running_mean")):
            assert not p.data.any()
        else:
            assert (p.data == 1).all()


def test_branches_are_independent(params, rng):
    x = rng.standard_normal((1, 4, 200, 168)).astype(np.float32)
    base = net.forward(params, x)
    p2 = params.copy()
    p2["branch.et.level3.out.b"].data[...] += 5.0
    moved = net.forward(p2, x)
    assert np.array_equal(base.wt.data, moved.wt.data)
    assert np.array_equal(base.net.data, moved.net.data)
    assert not np.array_equal(base.et.data, moved.et.data)


def test_ablation_configs_build_and_run(tmp_path, rng):
    x = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
    for cfg in (net.NetworkConfig(16, 16, paths=("cross",)),
                net.NetworkConfig(16, 16, branches=("wt",)),
                net.NetworkConfig(16, 16, mono_kernels=8, branch_kernels=8)):
        p = net.build_network(cfg)
        out = net.forward(p, x)
        assert sum(y is not None for y in out) == len(cfg.branches)
        assert net.infer_config((n, q.shape) for n, q in p.items()) == dataclasses.replace(
            cfg, input_height=200, input_width=168)


def test_shape_free_settings_come_from_config(tmp_path, rng):
    cfg = net.NetworkConfig(16, 16, modulation="add", bn_eps=1e-5)
    p = net.build_network(cfg)
    path = tmp_path / "add.tseg"
    net.save_model(p, path)
    assert net.load_model(path).config.modulation == "mul"
    loaded = net.load_model(path, cfg)
    assert loaded.config == cfg
    x = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
    assert net.forward(loaded, x).wt.data.tobytes() == net.forward(p, x).wt.data.tobytes()
    with pytest.raises(FormatError):
        net.load_model(path, net.NetworkConfig(16, 16, branch_kernels=8))


def test_config_validation():
    with pytest.raises(ContractError):
        net.NetworkConfig(input_height=201)
    with pytest.raises(ContractError):
        net.NetworkConfig(paths=("mono", "bogus"))
    with pytest.raises(ContractError):
        net.NetworkConfig.from_dict({"kernels": 3})
    cfg = net.NetworkConfig(branch_kernels=8)
    assert net.NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_frozen_parameters_rejected_twice(params):
    p = params.copy()
    p.freeze("branch.wt")
    with pytest.raises(ContractError):
        p.freeze("branch.wt")


def test_save_load_bitwise(tmp_path, params):
    path = tmp_path / "m.tseg"
    net.save_model(params, path)
    loaded = net.load_model(path)
    assert loaded.names() == params.names()
    for name, p in params.items():
        assert loaded[name].data.tobytes() == p.data.tobytes()
        assert loaded[name].trainable == p.trainable
    net.save_model(loaded, tmp_path / "again.tseg")
    assert (tmp_path / "again.tseg").read_bytes() == path.read_bytes()


def test_model_file_errors(tmp_path, params):
    path = tmp_path / "m.tseg"
    net.save_model(params, path)
    blob = path.read_bytes()
    with pytest.raises(FormatError):
        net._parse_model(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        net._parse_model(blob[:-100])
    bad_version = blob[:4] + struct.pack("<I", 2) + blob[8:]
    with pytest.raises(FormatError):
        net._parse_model(bad_version)
    # drop the final entry but keep the trailing length consistent
    body = blob[:-8]
    count = struct.unpack_from("<I", body, 8)[0]
    fewer = body[:8] + struct.pack("<I", count - 1) + body[12:]
    with pytest.raises(FormatError):
        net._parse_model(fewer + struct.pack("<Q", len(fewer)))


def test_model_file_layout_mismatch(tmp_path):
    p = net.build_network(seed=0)
    p._params["fe.cross.conv1.w"] = E.Parameter(np.zeros((16, 4, 3, 3), np.float32)[:, :3].copy())
    path = tmp_path / "bad.tseg"
    net.save_model(p, path)
    with pytest.raises(FormatError):
        net.load_model(path)


def test_predict_probabilities_chunking(params, rng):
    imgs = rng.standard_normal((5, 4, 200, 168)).astype(np.float32)
    a = net.predict_probabilities(params, imgs, chunk=2)
    b = net.predict_probabilities(params, imgs, chunk=5)
    assert a.shape == (3, 5, 200, 168)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_he_uniform_limit_example():
    assert net.he_uniform_limit(9) == pytest.approx(0.81650, abs=1e-5)


def test_zero_input_gives_constant_half(params):
    out = net.forward(params, np.zeros((2, 4, 200, 168), np.float32))
    for y in out:
        assert (y.data == 0.5).all()


def test_forward_is_deterministic(params, rng):
    x = rng.standard_normal((2, 4, 200, 168)).astype(np.float32)
    a, b = net.forward(params, x), net.forward(params, x)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()


def test_zeroing_one_branch_changes_only_it(params, rng):
    x = rng.standard_normal((1, 4, 200, 168)).astype(np.float32)
    base = net.forward(params, x)
    p2 = params.copy()
    for name in p2.names():
        if name.startswith("branch.net.") and p2[name].trainable:
            p2[name].data[...] = 0
    out = net.forward(p2, x)
    assert out.wt.data.tobytes() == base.wt.data.tobytes()
    assert out.et.data.tobytes() == base.et.data.tobytes()
    assert (out.net.data == 0.5).all() and not (base.net.data == 0.5).all()


def test_row_decompositions():
    cfg = net.NetworkConfig()
    rows = _row_by_hand(cfg)
    assert 160 + 304 + 592 + 192 == rows["1"]
    assert 6928 + 2320 + 128 == rows["4"]
    assert 3 * (2320 + 17) == rows["7"]
    assert 3 * 16 * (48 + 1) == rows["SC1"]
