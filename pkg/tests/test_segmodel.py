import numpy as np
import pytest

from pfedsam import numerics as nm
from pfedsam.errors import ConfigError, ShapeError
from pfedsam.numerics import grad_check_params
from pfedsam.optim import Adam
from pfedsam.segmodel import (
    ModelConfig,
    build_model,
    count_params_flops,
    load_checkpoint,
    partition_params,
    save_checkpoint,
    transfer_table,
)


def images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 1, size, size))


def test_default_geometry():
    cfg = ModelConfig()
    assert cfg.grid == (8, 8) and cfg.n_tokens == 64 and cfg.mask_size == 16
    model = build_model(cfg.with_variant("base"), 0)
    assert model.forward(images(1, 64)[0]).shape == (16, 16)


@pytest.mark.parametrize("variant", ["lora", "lora_moe"])
def test_fresh_adapters_are_transparent(variant, small_model_config):
    x = images(4, 32, seed=1)
    base = build_model(small_model_config.with_variant("base"), 7).predict_logits(x)
    adapted = build_model(small_model_config.with_variant(variant), 7).predict_logits(x)
    assert np.abs(base - adapted).max() <= 1e-12


def test_zero_image_finite(small_model_config):
    out = build_model(small_model_config, 0).forward(np.zeros((1, 32, 32)))
    assert np.isfinite(out.data).all()


def test_identical_images_identical_logits(small_model_config):
    model = build_model(small_model_config, 0)
    img = images(1, 32)[0]
    assert model.forward(img).data.tobytes() == model.forward(img.copy()).data.tobytes()


def test_forward_shape_errors(small_model_config):
    model = build_model(small_model_config, 0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 16, 16)))
    with pytest.raises(ShapeError):
        model.forward_batch(np.zeros((2, 32, 32)))


def _fd_grad(loss_fn, p, eps=1e-5):
    orig, num = p.data, np.zeros(p.size)
    with nm.no_grad():
        for i in range(p.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = orig.copy().reshape(-1)
                probe[i] += sign * eps
                p.data = probe.reshape(orig.shape)
                vals.append(loss_fn().item())
            num[i] = (vals[0] - vals[1]) / (2 * eps)
    p.data = orig
    return num.reshape(orig.shape)


def test_mean_logit_gradcheck_adapter_params(small_model_config):
    model = build_model(small_model_config, 3)
    rng = np.random.default_rng(0)
    picked = {n: p for n, p in model.adapter_params.items() if n.startswith("block0.attn.v")}
    for p in picked.values():
        p.data = rng.normal(0, 0.3, size=p.shape)
    x = images(1, 32, seed=2)

    def loss():
        return nm.mean(model.forward_batch(x)[0])

    dense = {n: p for n, p in picked.items() if not n.endswith(".gate")}
    rep = grad_check_params(loss, dense)
    assert rep.passed, str(rep)

    # gate rows of experts no token selected have an exactly zero gradient;
    # their finite differences are pure roundoff, so compare those absolutely
    gate = picked["block0.attn.v.lmoe.gate"]
    gate.grad = None
    nm.backward(loss())
    analytic, numeric = gate.grad, _fd_grad(loss, gate)
    zero = np.abs(analytic) < 1e-15
    assert zero.any() and (~zero).any()
    assert np.abs(numeric[zero]).max() < 1e-9
    rel = np.abs(analytic - numeric)[~zero] / np.maximum(np.abs(analytic), np.abs(numeric))[~zero]
    assert rel.max() <= 1e-4


def test_partition_lora_has_no_private(small_model_config):
    part = partition_params(build_model(small_model_config.with_variant("lora"), 0))
    assert part.local_private == frozenset()


def test_partition_lmoe_enumeration():
    cfg = ModelConfig()
    model = build_model(cfg, 0)
    part = model.partition()
    hooked = cfg.depth * 2  # q and v in every block
    assert len(part.local_private) == hooked * (1 + 2 * cfg.experts)
    assert sum(n.endswith(".lmoe.gate") for n in part.local_private) == hooked
    assert sum(n.endswith(".kernel") for n in part.local_private) == hooked * cfg.experts


@pytest.mark.parametrize("variant", ["base", "lora", "lora_moe"])
def test_partition_is_disjoint_and_total(variant, small_model_config):
    model = build_model(small_model_config.with_variant(variant), 0)
    p = model.partition()
    assert len(p.frozen) + len(p.global_shared) + len(p.local_private) == len(model.params)
    assert p.all == set(model.params)
    assert not (p.frozen & p.global_shared) and not (p.global_shared & p.local_private)


def test_lora_pair_param_count():
    cfg = ModelConfig(embed_dim=32, rank=4, depth=1, variant="lora")
    model = build_model(cfg, 0)
    pair = sum(model.adapter_params[f"block0.attn.q.lora.{m}"].size for m in "AB")
    assert pair == 4 * (32 + 32) == 256


def test_transfer_counts_match_across_variants():
    cfg = ModelConfig()
    lora = count_params_flops(build_model(cfg.with_variant("lora"), 0))
    moe = count_params_flops(build_model(cfg.with_variant("lora_moe"), 0))
    assert lora.transfer_param_count == moe.transfer_param_count
    assert moe.trainable_param_count > lora.trainable_param_count


def test_transfer_table_ordering():
    rows = {r["model"]: r for r in transfer_table(ModelConfig())}
    assert rows["full"]["params"] > rows["lora_moe"]["params"] >= rows["lora"]["params"]
    assert rows["ours"]["params"] == rows["lora"]["params"]
    assert rows["lora_moe"]["flops"] >= rows["lora"]["flops"] >= rows["full"]["flops"]


def test_variants_share_base_and_decoder(small_model_config):
    a = build_model(small_model_config.with_variant("lora"), 11)
    b = build_model(small_model_config.with_variant("lora_moe"), 11)
    assert a.base_hash() == b.base_hash()
    for n in a.decoder_params:
        assert a.decoder_params[n].data.tobytes() == b.decoder_params[n].data.tobytes()
    np.testing.assert_array_equal(a.adapter_params["block0.attn.q.lora.A"].data, b.adapter_params["block0.attn.q.lora.A"].data)


def test_base_frozen_under_training(small_model_config):
    model = build_model(small_model_config, 0)
    before = model.base_hash()
    opt = Adam(model.trainable_params, lr=1e-2)
    x = images(2, 32)
    y = (np.random.default_rng(1).uniform(size=(2, 8, 8)) > 0.5).astype(float)
    for _ in range(3):
        model.zero_grad()
        logits, aux = model.forward_batch(x)
        loss = nm.mean((logits - y) * (logits - y)) + aux
        grads = nm.backward(loss)
        assert not set(grads) & set(model.base_params)
        opt.step(grads)
    assert model.base_hash() == before
    assert all(p.grad is None for p in model.base_params.values())


def test_clone_is_independent(small_model_config):
    model = build_model(small_model_config, 0)
    twin = model.clone()
    name = "decoder.conv2.bias"
    twin.trainable_params[name].data = twin.trainable_params[name].data + 1.0
    assert not np.array_equal(model.trainable_params[name].data, twin.trainable_params[name].data)
    assert twin.base_hash() == model.base_hash()


def test_load_state_rejects_base_and_bad_shapes(small_model_config):
    model = build_model(small_model_config, 0)
    with pytest.raises(KeyError):
        model.load_state({"pos_embed": np.zeros((16, 16))})
    with pytest.raises(ShapeError):
        model.load_state({"decoder.conv2.bias": np.zeros(3)})


def test_checkpoint_round_trip(tmp_path, small_model_config):
    model = build_model(small_model_config, 4)
    for p in model.trainable_params.values():
        p.data = p.data + 0.01
    save_checkpoint(model, tmp_path / "m.pfsm")
    back = load_checkpoint(tmp_path / "m.pfsm")
    x = images(2, 32)
    assert back.predict_logits(x).tobytes() == model.predict_logits(x).tobytes()
    (tmp_path / "m.pfsm.json").unlink()
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m.pfsm")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m.pfsm", small_model_config.with_variant("lora"))


@pytest.mark.parametrize(
    "kwargs,field",
    [
        ({"image_size": 60}, "patch_size"),
        ({"heads": 3}, "heads"),
        ({"rank": 32}, "rank"),
        ({"top_k": 5}, "top_k"),
        ({"variant": "full"}, "variant"),
        ({"alpha": 0.0}, "alpha"),
        ({"depth": 0}, "depth"),
    ],
)
def test_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as err:
        ModelConfig(**kwargs)
    assert err.value.field == field
