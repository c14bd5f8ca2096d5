import json

import numpy as np
import pytest

from qfpn import tensorgraph as tg
from qfpn.losses import staged_loss
from qfpn.segnet import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from qfpn.tensorgraph import ShapeError

SMALL = dict(encoder_widths=[4, 8, 8, 8], resolution=16)


def batch(cfg, b=2, seed=0):
    return np.random.default_rng(seed).normal(size=(b, cfg.input_channels, cfg.resolution, cfg.resolution))


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(topology="fpn", merge_kind="identity"),
            dict(resolution=24),
            dict(encoder_widths=[8, 16, 32]),
            dict(qubits=5),
            dict(topology="ring"),
            dict(encoding_scale_kind="log"),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


class TestBuild:
    def test_baseline_has_no_quantum_params(self):
        assert build_model(ModelConfig(topology="unet_skip", merge_kind="identity")).n_quantum_params() == 0

    def test_fpn_budget(self):
        model = build_model(ModelConfig(topology="fpn", merge_kind="quantum", qubits=4, layers=2))
        assert model.n_quantum_params() == 72
        assert model.n_gate_scale_shift() == 24

    def test_skip_placement(self):
        all_levels = build_model(ModelConfig(topology="unet_skip", merge_kind="quantum"))
        bottleneck = build_model(ModelConfig(topology="unet_skip", merge_kind="quantum", skip_placement="bottleneck_only"))
        assert all_levels.n_quantum_params() == 4 * 24
        assert bottleneck.n_quantum_params() == 24
        assert build_model(ModelConfig(topology="unet_skip", merge_kind="quantum", qubits=6)).n_quantum_params() == 4 * 36

    def test_ablation_parity(self):
        q = build_model(ModelConfig(merge_kind="quantum"))
        c = build_model(ModelConfig(merge_kind="classical"))
        diff = set(q.params) - set(c.params)
        assert set(c.params) <= set(q.params)
        assert diff and all(".gate" in name for name in diff)
        for name in c.params:
            np.testing.assert_array_equal(q.params[name].values, c.params[name].values)

    def test_quantum_group_tags(self):
        model = build_model(ModelConfig())
        quantum = [p.name for p in model.parameters() if p.group == "quantum"]
        assert quantum == [f"fpn.gate{k}.circuit" for k in range(3)]

    def test_seed_changes_weights(self):
        a = build_model(ModelConfig(seed=0)).params["enc0.conv.weight"].values
        b = build_model(ModelConfig(seed=1)).params["enc0.conv.weight"].values
        assert not np.array_equal(a, b)


CONFIGS = [
    ModelConfig(topology="fpn", merge_kind="quantum", **SMALL),
    ModelConfig(topology="fpn", merge_kind="classical", **SMALL),
    ModelConfig(topology="unet_skip", merge_kind="quantum", **SMALL),
    ModelConfig(topology="unet_skip", merge_kind="identity", **SMALL),
    ModelConfig(topology="fpn", merge_kind="quantum", qubits=6, reupload=False, encoding_scale_kind="frequency", **SMALL),
]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.topology}-{c.merge_kind}-{c.qubits}")
class TestForward:
    def test_shape_and_finite(self, cfg):
        out = forward(build_model(cfg), batch(cfg))
        assert out.shape == (2, 1, cfg.resolution, cfg.resolution)
        assert np.isfinite(out.values).all()

    def test_duplicate_rows(self, cfg):
        x = batch(cfg, b=1)
        out = forward(build_model(cfg), np.concatenate([x, x, x])).values
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_gradient_reach(self, cfg):
        model = build_model(cfg)
        rng = np.random.default_rng(1)
        x = batch(cfg, b=3, seed=2)
        y = (rng.random((3, 1, cfg.resolution, cfg.resolution)) > 0.5).astype(float)
        loss, _ = staged_loss(forward(model, x), y, 1)
        tg.backward(loss)
        for p in model.parameters():
            assert p.grad is not None, p.name
            assert np.count_nonzero(p.grad) > 0, p.name

    def test_resolution_mismatch(self, cfg):
        with pytest.raises(ShapeError):
            forward(build_model(cfg), np.zeros((1, cfg.input_channels, 2 * cfg.resolution, 2 * cfg.resolution)))


def test_zero_decoder_gives_head_bias():
    cfg = ModelConfig(topology="fpn", merge_kind="classical", **SMALL)
    model = build_model(cfg)
    for p in model.parameters():
        if p.group == "decoder":
            p.node.values[...] = 0.0
    model.params["head.bias"].node.values[...] = 0.37
    np.testing.assert_array_equal(forward(model, batch(cfg)).values, 0.37)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(**SMALL, seed=4)
    model = build_model(cfg)
    for p in model.parameters():
        p.node.values[...] += 0.01
    save_checkpoint(model, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["dtype"] == "<f8"
    assert (tmp_path / "checkpoint.bin").stat().st_size == 8 * model.n_params()
    assert [e["name"] for e in manifest["parameters"]] == list(model.params)
    loaded = load_checkpoint(tmp_path)
    for name, p in model.params.items():
        assert loaded.params[name].values.tobytes() == p.values.tobytes()
        assert loaded.params[name].group == p.group
    x = batch(cfg)
    assert forward(loaded, x).values.tobytes() == forward(model, x).values.tobytes()


def test_checkpoint_truncated(tmp_path):
    model = build_model(ModelConfig(**SMALL))
    save_checkpoint(model, tmp_path)
    blob = (tmp_path / "checkpoint.bin").read_bytes()
    (tmp_path / "checkpoint.bin").write_bytes(blob + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
