"""Network wiring tests: shapes, ablations, residual branch, persistence."""

import numpy as np
import pytest

from autocenet import autodiff as ad
from autocenet.data import Volume
from autocenet.errors import (CheckpointFormatError, ConfigurationError,
                              DimensionError, UsageError)
from autocenet.network import (ABLATIONS, AutoCENet, NetworkConfig,
                               apply_ablation, build, desk_config,
                               load_checkpoint, read_checkpoint,
                               save_checkpoint, write_blobs)


def tiny_config(**overrides):
    base = dict(input_dims=(16, 16, 8), base_width=8, context_width=8,
                prior_width=8, prior_up_width=4, contour_width=8,
                fusion_width=8)
    base.update(overrides)
    return desk_config(**base)


def tiny_input(rng, dims=(16, 16, 8), batch=1):
    return ad.Tensor(rng.random((batch, 1) + dims, dtype=np.float64
                                ).astype(np.float32))


def test_config_validation():
    desk_config().validate()
    NetworkConfig().validate()
    with pytest.raises(ConfigurationError):
        desk_config(input_dims=(30, 32, 16)).validate()
    with pytest.raises(ConfigurationError):
        desk_config(base_width=0).validate()
    with pytest.raises(ConfigurationError):
        desk_config(contour_mode="sometimes").validate()
    with pytest.raises(ConfigurationError):
        desk_config(manual_threshold=0.0).validate()
    with pytest.raises(ConfigurationError):
        desk_config(groups=0).validate()


@pytest.mark.parametrize("dims", [(16, 16, 8), (32, 32, 16), (16, 24, 8)])
def test_forward_shape_contract(dims):
    rng = np.random.default_rng(60)
    net = AutoCENet(tiny_config(input_dims=dims))
    out = net(tiny_input(rng, dims), mode="eval")
    half = tuple(d // 2 for d in dims)
    assert out.final_logits.shape == (1, 2) + dims
    assert out.prior_residual_logits.shape == (1, 2) + half
    assert out.contour_logits.shape == (1, 2) + dims
    assert np.isfinite(out.final_logits.data).all()


def test_forward_batch_axis():
    rng = np.random.default_rng(61)
    net = AutoCENet(tiny_config())
    out = net(tiny_input(rng, batch=2), mode="eval")
    assert out.final_logits.shape[0] == 2


def test_forward_input_validation():
    net = AutoCENet(tiny_config())
    with pytest.raises(DimensionError):
        net(ad.Tensor(np.zeros((1, 1, 16, 16, 4), dtype=np.float32)))
    with pytest.raises(DimensionError):
        net(ad.Tensor(np.zeros((1, 2, 16, 16, 8), dtype=np.float32)))
    with pytest.raises(ConfigurationError):
        net(ad.Tensor(np.zeros((1, 1, 16, 16, 8), dtype=np.float32)),
            mode="predict")


def test_forward_mode_controls_batch_norm():
    rng = np.random.default_rng(62)
    net = AutoCENet(tiny_config())
    x = tiny_input(rng)
    before = {k: v.copy() for k, v in net.named_buffers()}
    net(x, mode="eval")
    for k, v in net.named_buffers():
        assert np.array_equal(v, before[k]), k
    net(x, mode="train")
    changed = any(not np.array_equal(v, before[k])
                  for k, v in net.named_buffers())
    assert changed


def test_residual_prior_antisymmetry():
    """Swapping the two parallel transitions flips the residual sign."""
    rng = np.random.default_rng(63)
    net = AutoCENet(tiny_config())
    x = tiny_input(rng)
    out1 = net(x, mode="eval").prior_residual_logits.data.copy()

    # state_dict returns live references, so copy before cross-assigning
    state = {k: v.copy() for k, v in net.state_dict().items()}
    swapped = {}
    for name, arr in state.items():
        if name.startswith("prior_a."):
            swapped["prior_b." + name[len("prior_a."):]] = arr
        elif name.startswith("prior_b."):
            swapped["prior_a." + name[len("prior_b."):]] = arr
        else:
            swapped[name] = arr
    net.load_state_dict(swapped)
    out2 = net(x, mode="eval").prior_residual_logits.data
    assert np.array_equal(out2, -out1)


def test_sequential_prior_is_not_a_residual():
    rng = np.random.default_rng(64)
    cfg = apply_ablation(tiny_config(), "R")
    net = AutoCENet(cfg)
    x = tiny_input(rng)
    out = net(x, mode="eval")
    assert out.prior_residual_logits.shape == (1, 2, 8, 8, 4)
    # first stage now feeds the second: widths chain through sequential_width
    assert net.prior_a.reduce_out.weight.shape[0] == cfg.sequential_width
    assert net.prior_b.reduce_out.weight.shape[0] == 2


def test_ablation_mapping():
    base = tiny_config()
    assert apply_ablation(base, "none").contour_mode == "self_supervised"
    assert apply_ablation(base, "FC").contour_mode == "full"
    assert apply_ablation(base, "MC").contour_mode == "manual"
    for name in ("autonet", "att", "A", "R", "AR"):
        cfg = apply_ablation(base, name)
        assert cfg.contour_mode == "off", name
    assert apply_ablation(base, "att").disable_attention
    assert apply_ablation(base, "A").disable_autocontext
    assert apply_ablation(base, "R").disable_residual_prior
    ar = apply_ablation(base, "AR")
    assert ar.disable_autocontext and ar.disable_residual_prior
    assert not apply_ablation(base, "autonet").disable_attention
    with pytest.raises(ConfigurationError):
        apply_ablation(base, "bogus")


def test_attention_ablation_removes_gates():
    with_att = AutoCENet(tiny_config())
    without = AutoCENet(apply_ablation(tiny_config(), "att"))
    names_with = {n for n, _ in with_att.named_parameters()}
    names_without = {n for n, _ in without.named_parameters()}
    assert any(".attention." in n or n.endswith("attention.vector")
               for n in names_with)
    assert not any("attention" in n for n in names_without)
    assert without.count_parameters() < with_att.count_parameters()


def test_contour_off_removes_branch():
    net = AutoCENet(apply_ablation(tiny_config(), "autonet"))
    assert net.contour is None and net.contour_head is None
    assert not any(n.startswith("contour") for n, _ in net.named_parameters())
    rng = np.random.default_rng(65)
    out = net(tiny_input(rng), mode="eval")
    assert out.contour_logits is None
    assert out.final_logits.shape == (1, 2, 16, 16, 8)


def test_autocontext_ablation_keeps_topology():
    # the prior branch stays wired; only its training signal is dropped
    cfg = apply_ablation(tiny_config(), "A")
    net = AutoCENet(cfg)
    rng = np.random.default_rng(66)
    out = net(tiny_input(rng), mode="eval")
    assert out.prior_residual_logits is not None
    assert cfg.disable_autocontext


def test_every_ablation_constructs_and_runs():
    rng = np.random.default_rng(67)
    x = tiny_input(rng)
    for name in ABLATIONS:
        net = build(apply_ablation(tiny_config(), name))
        out = net(x, mode="eval")
        assert np.isfinite(out.final_logits.data).all(), name


def test_contour_fusion_toggle_changes_fusion_width():
    wide = AutoCENet(tiny_config())
    narrow = AutoCENet(tiny_config(include_contour_in_fusion=False))
    cfg = tiny_config()
    assert wide.fusion.down.weight.shape[1] == (
        cfg.context_width + cfg.prior_up_width + cfg.contour_width)
    assert narrow.fusion.down.weight.shape[1] == (
        cfg.context_width + cfg.prior_up_width)
    rng = np.random.default_rng(68)
    out = narrow(tiny_input(rng), mode="eval")
    assert out.contour_logits is not None  # branch still supervised


def test_seed_makes_init_deterministic():
    a = AutoCENet(tiny_config(seed=5))
    b = AutoCENet(tiny_config(seed=5))
    c = AutoCENet(tiny_config(seed=6))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_count_parameters():
    net = AutoCENet(tiny_config())
    assert net.count_parameters() == sum(p.data.size for p in net.parameters())
    assert net.count_parameters() > 1000


def test_predict_untrained_and_tie_break():
    net = AutoCENet(tiny_config())
    vol = Volume(np.random.default_rng(69).random((16, 16, 8),
                                                  ).astype(np.float32), (1, 1, 2))
    with pytest.raises(UsageError):
        net.predict(vol)
    net.trained = True
    with pytest.raises(DimensionError):
        net.predict(Volume(np.zeros((8, 8, 8), dtype=np.float32), (1, 1, 1)))
    pred = net.predict(vol)
    assert pred.dims == (16, 16, 8)
    assert pred.spacing == vol.spacing
    # exact logit ties (all-zero parameters) must fall to background
    for p in net.parameters():
        p.data[...] = 0.0
    assert net.predict(vol).data.sum() == 0


def test_predict_matches_forward_argmax():
    rng = np.random.default_rng(70)
    net = AutoCENet(tiny_config())
    net.trained = True
    vol = Volume(rng.random((16, 16, 8)).astype(np.float32), (1, 1, 2))
    pred = net.predict(vol)
    out = net(ad.Tensor(vol.data[None, None]), mode="eval")
    probs = ad.channel_softmax(out.final_logits).data[0]
    assert np.array_equal(pred.data, (probs[1] > probs[0]).astype(np.uint8))


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = AutoCENet(tiny_config(seed=7))
    net(tiny_input(np.random.default_rng(71)), mode="train")  # move BN stats
    path = tmp_path / "net.acnw"
    save_checkpoint(net, path)
    other = AutoCENet(tiny_config(seed=8))
    load_checkpoint(other, path)
    assert other.trained
    ours = net.state_dict()
    for name, arr in other.state_dict().items():
        assert np.array_equal(arr, ours[name]), name
    # reading back a re-save produces identical bytes
    path2 = tmp_path / "net2.acnw"
    save_checkpoint(other, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_architecture_mismatch(tmp_path):
    net = AutoCENet(tiny_config())
    path = tmp_path / "net.acnw"
    save_checkpoint(net, path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(AutoCENet(apply_ablation(tiny_config(), "autonet")), path)
    with pytest.raises(DimensionError):
        load_checkpoint(AutoCENet(tiny_config(base_width=4)), path)


def test_checkpoint_scalar_and_empty_names(tmp_path):
    path = tmp_path / "odd.acnw"
    write_blobs(path, {"s": np.float32(3.5), "": np.arange(3, dtype=np.float32)})
    state = read_checkpoint(path)
    # 0-d values are normalized to one-element vectors on write
    assert state["s"].shape == (1,)
    assert float(state["s"][0]) == 3.5
    assert np.array_equal(state[""], [0.0, 1.0, 2.0])


def corrupt(buf, at, new_bytes):
    return buf[:at] + new_bytes + buf[at + len(new_bytes):]


def test_checkpoint_malformations_report_offsets(tmp_path):
    path = tmp_path / "net.acnw"
    write_blobs(path, {"w": np.ones((2, 3), dtype=np.float32)})
    good = path.read_bytes()
    bad = tmp_path / "bad.acnw"

    bad.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == 0

    bad.write_bytes(corrupt(good, 4, struct_pack_u32(99)))
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == 4

    bad.write_bytes(good[:10])  # cut inside the header
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == 4

    bad.write_bytes(good[:-4])  # cut inside the blob data
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == 12 + 4 + 1 + 4 + 8  # start of w's data

    bad.write_bytes(good + b"\x00\x00")  # trailing garbage
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == len(good)

    # implausible ndim in w's record (after name length + name)
    bad.write_bytes(corrupt(good, 12 + 4 + 1, struct_pack_u32(64)))
    with pytest.raises(CheckpointFormatError) as e:
        read_checkpoint(bad)
    assert e.value.offset == 12 + 4 + 1


def struct_pack_u32(v):
    import struct
    return struct.pack("<I", v)
