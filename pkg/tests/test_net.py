import numpy as np
import pytest

from dc4cr.net import (
    FREEU_DEFAULT,
    FREEU_IDENTITY,
    FreeUParams,
    UNet,
    freeu_transform,
    load_checkpoint,
    parse_prompt,
    read_records,
    refine_subject_embedding,
    save_checkpoint,
    write_records,
)
from dc4cr.numerics import Tensor
from oracles import SMALL_NET, live_net, net_inputs, network_grad_error

def test_output_shape_and_size_check():
    net = UNet(SMALL_NET)
    x, ctrl, t = net_inputs(0, size=12)
    out = net(x, t, net.cond_matrix(["thin", "thick"]), ctrl)
    assert out.shape == x.shape
    x10 = Tensor(np.zeros((1, 3, 10, 10)))
    with pytest.raises(ValueError, match="multiple of 4"):
        net(x10, [0], net.cond_matrix(["thin"]))


def test_timestep_range_checked():
    net = UNet(SMALL_NET)
    x, _, _ = net_inputs(0, n=1)
    with pytest.raises(ValueError):
        net(x, [-1], net.cond_matrix(["thin"]))
    with pytest.raises(ValueError):
        net(x, [200], net.cond_matrix(["thin"]), num_steps=200)


def test_zero_control_is_noop_at_init():
    net = UNet(SMALL_NET)
    x, ctrl, t = net_inputs(1)
    cond = net.cond_matrix(["thin", "thin"])
    a = net(x, t, cond, ctrl).data
    b = net(x, t, cond, None).data
    assert np.array_equal(a, b)


def test_strength_zero_equals_no_control():
    net = live_net(1, lora=False)
    x, ctrl, t = net_inputs(1)
    cond = net.cond_matrix(["thick", "thin"])
    assert np.array_equal(net(x, t, cond, ctrl, strength=0.0).data, net(x, t, cond).data)


def test_control_residuals_linear_in_strength():
    net = live_net(2, lora=False)
    _, ctrl, _ = net_inputs(2)
    r1 = net.control_residuals(ctrl, 1.0)
    r2 = net.control_residuals(ctrl, 2.5)
    for a, b in zip(r1, r2):
        np.testing.assert_allclose(b.data, 2.5 * a.data, rtol=1e-13, atol=1e-14)


def test_prompts_change_output():
    net = UNet(SMALL_NET)
    x, ctrl, t = net_inputs(3, n=1)
    thin = net(x, t, net.cond_matrix(["thin"]), ctrl).data
    thick = net(x, t, net.cond_matrix(["thick"]), ctrl).data
    null = net(x, t, net.cond_matrix([None]), ctrl).data
    assert np.abs(thin - thick).max() > 0 and np.abs(thin - null).max() > 0


@pytest.mark.parametrize("text,want", [("thin", "thin"), ("Thick", "thick"), ("remove thin cloud", "thin")])
def test_parse_prompt(text, want):
    assert parse_prompt(text) == want


def test_parse_prompt_lists_valid():
    with pytest.raises(ValueError, match="thin, thick"):
        parse_prompt("haze")


def test_freeu_worked_scalar():
    assert freeu_transform(1.0, FreeUParams(2, 1, 3, 0.5)) == 9.5
    assert float(freeu_transform(Tensor([1.0]), FreeUParams(2, 1, 3, 0.5)).data[0]) == 9.5


def test_freeu_identity_bitwise_and_default_changes_output():
    net = live_net(4)
    x, ctrl, t = net_inputs(4)
    cond = net.cond_matrix(["thin", "thick"])
    plain = net(x, t, cond, ctrl).data
    assert np.array_equal(net(x, t, cond, ctrl, FREEU_IDENTITY).data, plain)
    assert np.abs(net(x, t, cond, ctrl, FREEU_DEFAULT).data - plain).mean() > 0


def test_freeu_parse():
    assert FreeUParams.parse("0.9,0.4,1.1,1.1") == FREEU_DEFAULT
    with pytest.raises(ValueError):
        FreeUParams.parse("1,2,3")


def test_refine_subject_embedding():
    z = np.array([1.0, -2.0])
    np.testing.assert_array_equal(refine_subject_embedding(z, np.array([0.5, 0.5]), 0.1), [0.95, -2.05])
    with pytest.raises(ValueError):
        refine_subject_embedding(z, z, 0.0)


def test_merged_net_matches_attached():
    net = live_net(5)
    x, ctrl, t = net_inputs(5)
    cond = net.cond_matrix(["thin", "thick"])
    a = net(x, t, cond, ctrl).data
    merged = net.merged()
    b = merged(x, t, merged.cond_matrix(["thin", "thick"]), ctrl).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_lora_mode_trainable_set():
    net = UNet(SMALL_NET)
    net.attach_lora(2, 0.7)
    net.set_trainable(lora=True, control=True)
    trainable = {n for n, _ in net.named_parameters(trainable_only=True)}
    assert not any(n.startswith(("enc.", "dec.", "emb.", "ctrl.")) and "lora" not in n for n in trainable)
    assert {"prompt.thin", "prompt.thick", "prompt.subject"} <= trainable
    assert any(n.endswith("lora_B") for n in trainable)


@pytest.mark.parametrize("seed", range(10))
def test_full_network_gradcheck(seed):
    errors = network_grad_error(seed)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-3, (worst, errors[worst])


def test_checkpoint_roundtrip(tmp_path):
    net = live_net(6)
    net.freeu_default = FREEU_DEFAULT
    save_checkpoint(net, tmp_path / "m.ckpt", extra={"note": np.array([1.0, 2.0])})
    back = load_checkpoint(tmp_path / "m.ckpt")
    x, ctrl, t = net_inputs(6)
    a = net(x, t, net.cond_matrix(["thin", "thick"]), ctrl, FREEU_DEFAULT).data
    b = back(x, t, back.cond_matrix(["thin", "thick"]), ctrl, back.freeu_default).data
    assert np.max(np.abs(a - b)) <= 1e-12
    assert back.freeu_default == FREEU_DEFAULT
    assert back.config.channels == SMALL_NET.channels
    save_checkpoint(back, tmp_path / "again.ckpt", extra={"note": np.array([1.0, 2.0])})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(UNet(SMALL_NET), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad_magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    for name in ("bad_magic", "short", "long"):
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / f"{name}.ckpt")


def test_records_little_endian_layout(tmp_path):
    write_records(tmp_path / "r.bin", {"ab": np.array([[1.5]])})
    raw = (tmp_path / "r.bin").read_bytes()
    assert raw[:4] == b"DC4C"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[-8:] == np.array([1.5], dtype="<f8").tobytes()
    assert read_records(tmp_path / "r.bin")["ab"].shape == (1, 1)
