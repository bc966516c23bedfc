import pytest
import torch

from cartoseg.adapters import (
    AdapterConfig,
    AdapterWeights,
    adapted_layers,
    attach,
    count_report,
    count_trainable,
    effective_weight,
    extract_adapter_tensors,
    load_adapter_tensors,
    merge,
    near_square_split,
    preset_for_shots,
)
from cartoseg.encoder import VisionTransformer, preset_config
from cartoseg.errors import ConfigError
from cartoseg.head import ProbeHead, probability_mask
from cartoseg.objective import AdamWState, LossConfig, adamw_step, gradients, total_loss

ALL_METHODS = ("lora", "dora", "loha", "lokr")


def fresh_pair(method, rank=2, alpha=4.0, dropout=0.0):
    torch.manual_seed(0)
    base = VisionTransformer(preset_config("tiny", in_channels=1), image_size=16)
    torch.manual_seed(0)
    adapted = VisionTransformer(preset_config("tiny", in_channels=1), image_size=16)
    adapted.load_state_dict(base.state_dict())
    attach(AdapterConfig(method=method, rank=rank, alpha=alpha, dropout=dropout), adapted)
    return base, adapted


def train_steps(model, steps=20, seed=1):
    """A few gradient steps on a toy objective so adapters become non-trivial."""
    torch.manual_seed(seed)
    head = ProbeHead(model.config.embed_dim)
    params = [p for p in model.parameters() if p.requires_grad] + list(head.parameters())
    state = AdamWState.init(params)
    images = torch.rand(2, 16, 16, 1)
    target = (torch.rand(2, 16, 16) > 0.7).float()
    cfg = LossConfig()
    model.train()
    for _ in range(steps):
        probs = probability_mask(model(images), head, 16, 16)
        loss = total_loss(probs, target, cfg)
        grads = gradients(loss, params)
        adamw_step(params, grads, state, lr=1e-2)
    model.eval()
    return head


@pytest.mark.parametrize("method", ALL_METHODS)
def test_zero_init_transparency_bit_exact(method):
    base, adapted = fresh_pair(method)
    image = torch.rand(16, 16, 1)
    assert torch.equal(adapted.encode(image), base.encode(image))


def test_method_none_is_identity():
    torch.manual_seed(0)
    model = VisionTransformer(preset_config("tiny", in_channels=1), image_size=16)
    image = torch.rand(16, 16, 1)
    before = model.encode(image)
    attach(AdapterConfig(method="none"), model)
    assert torch.equal(model.encode(image), before)
    assert all(not p.requires_grad for p in model.parameters())


def test_effective_weight_lora_zero_delta():
    w = torch.rand(4, 4)
    factors = AdapterWeights(A=torch.rand(4, 2), B=torch.zeros(2, 4))
    assert torch.equal(effective_weight("lora", w, factors, scale=2.0), w)


def test_effective_weight_dora_identity():
    w = torch.rand(4, 4)
    factors = AdapterWeights(
        A=torch.rand(4, 2), B=torch.zeros(2, 4), magnitude=w.norm(dim=0)
    )
    assert torch.equal(effective_weight("dora", w, factors, scale=2.0), w)


def test_effective_weight_lora_2x2_hand_case():
    w = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    a = torch.tensor([[1.0], [2.0]])
    b = torch.tensor([[5.0, 6.0]])
    # delta = A @ B = [[5, 6], [10, 12]], scale 0.5 halves it.
    expected = torch.tensor([[3.5, 5.0], [8.0, 10.0]])
    out = effective_weight("lora", w, AdapterWeights(A=a, B=b), scale=0.5)
    assert torch.equal(out, expected)


def test_effective_weight_dora_hand_case():
    w = torch.tensor([[3.0, 0.0], [4.0, 1.0]])
    factors = AdapterWeights(
        A=torch.zeros(2, 1), B=torch.zeros(1, 2), magnitude=torch.tensor([10.0, 2.0])
    )
    out = effective_weight("dora", w, factors, scale=1.0)
    # columns scaled to norms 10 and 2: col0 norm 5 -> x2, col1 norm 1 -> x2
    expected = torch.tensor([[6.0, 0.0], [8.0, 2.0]])
    assert torch.allclose(out, expected)


def test_effective_weight_loha_lokr_hand_cases():
    w = torch.zeros(2, 2)
    loha = AdapterWeights(
        A=torch.tensor([[1.0], [2.0]]),
        B=torch.tensor([[1.0, 1.0]]),
        A2=torch.tensor([[3.0], [4.0]]),
        B2=torch.tensor([[1.0, 2.0]]),
    )
    out = effective_weight("loha", w, loha, scale=1.0)
    # (A@B) = [[1,1],[2,2]]; (A2@B2) = [[3,6],[4,8]]; hadamard product:
    assert torch.equal(out, torch.tensor([[3.0, 6.0], [8.0, 16.0]]))

    lokr = AdapterWeights(F1=torch.tensor([[2.0]]), F2=torch.tensor([[1.0, 0.0], [0.0, 3.0]]))
    out = effective_weight("lokr", torch.zeros(2, 2), lokr, scale=1.0)
    assert torch.equal(out, torch.tensor([[2.0, 0.0], [0.0, 6.0]]))


def test_dora_zero_column_epsilon_guarded():
    w = torch.zeros(3, 2)
    factors = AdapterWeights(
        A=torch.zeros(3, 1), B=torch.zeros(1, 2), magnitude=torch.zeros(2)
    )
    out = effective_weight("dora", w, factors, scale=1.0)
    assert torch.isfinite(out).all()
    assert torch.equal(out, torch.zeros(3, 2))


@pytest.mark.parametrize("method", ALL_METHODS)
def test_count_matches_enumeration_oracle(method):
    _, adapted = fresh_pair(method)
    head = ProbeHead(adapted.config.embed_dim)
    enumerated = sum(p.numel() for p in adapted.parameters() if p.requires_grad)
    enumerated += sum(p.numel() for p in head.parameters())
    cfg = AdapterConfig(method=method, rank=2, alpha=4.0)
    assert count_trainable(cfg, adapted.config, include_head=True) == enumerated


def test_vitl_reference_counts():
    vitl = preset_config("vitl-compat")
    assert count_trainable(AdapterConfig(method="none"), vitl) == 1_025
    lora = count_trainable(AdapterConfig(method="lora", rank=4), vitl, include_head=False)
    assert lora == 589_824
    loha = count_trainable(AdapterConfig(method="loha", rank=4), vitl, include_head=False)
    assert loha == 1_179_648
    dora = count_trainable(AdapterConfig(method="dora", rank=4), vitl, include_head=False)
    assert dora == 663_552
    # dora adds exactly one magnitude entry per output dim of each adapted matrix
    assert dora == lora + 1024 * 3 * 24


def test_count_report_flags_dora_discrepancy():
    vitl = preset_config("vitl-compat")
    report = count_report(AdapterConfig(method="dora", rank=4), vitl, include_head=False)
    assert report["count"] == 663_552
    assert report["reference_total"] == 689_000
    assert report["delta_to_reference"] == 663_552 - 689_000
    assert report["note"] is not None and "unconfirmed" in report["note"]
    tiny_report = count_report(AdapterConfig(method="lora"), preset_config("tiny"))
    assert tiny_report["reference_total"] is None


def test_qkvo_target_set_is_configurable():
    vitl = preset_config("vitl-compat")
    cfg = AdapterConfig(method="lora", rank=4, targets=("q", "k", "v", "o"))
    assert count_trainable(cfg, vitl, include_head=False) == 786_432


@pytest.mark.parametrize("method", ALL_METHODS)
def test_merge_equivalence_after_training(method):
    _, adapted = fresh_pair(method, dropout=0.1)
    train_steps(adapted, steps=20)
    image = torch.rand(4, 16, 16, 1)
    adapted.eval()
    with torch.no_grad():
        before = adapted(image)
    merged = merge(adapted)
    with torch.no_grad():
        after = merged(image)
    denom = before.abs().max().clamp_min(1e-8)
    assert ((after - before).abs().max() / denom) < 1e-5


def test_merge_fresh_is_bit_equal_and_idempotent():
    base, adapted = fresh_pair("lora")
    merged = merge(adapted)
    for name, tensor in merged.state_dict().items():
        assert torch.equal(tensor, base.state_dict()[name]), name
    again = merge(merged)
    image = torch.rand(16, 16, 1)
    assert torch.equal(again.encode(image), base.encode(image))


@pytest.mark.parametrize("method", ALL_METHODS)
def test_frozen_base_property(method):
    _, adapted = fresh_pair(method)
    snapshot = {
        f"{i}.{t}": layer.base.weight.clone() for i, t, layer in adapted_layers(adapted)
    }
    other = {
        k: v.clone() for k, v in adapted.state_dict().items() if ".adapter_" not in k
    }
    train_steps(adapted, steps=25)
    for i, t, layer in adapted_layers(adapted):
        assert torch.equal(layer.base.weight, snapshot[f"{i}.{t}"])
    for k, v in adapted.state_dict().items():
        if ".adapter_" not in k:
            assert torch.equal(v, other[k]), k


def test_lora_delta_rank_law():
    _, adapted = fresh_pair("lora", rank=2)
    train_steps(adapted, steps=10)
    for _, _, layer in adapted_layers(adapted):
        delta = (layer.adapter_A @ layer.adapter_B).detach()
        singular = torch.linalg.svdvals(delta)
        assert (singular[2:] < 1e-5 * max(singular[0].item(), 1e-12)).all()


def test_rank_too_large_rejected():
    torch.manual_seed(0)
    model = VisionTransformer(preset_config("tiny", in_channels=1), image_size=16)
    with pytest.raises(ConfigError, match="rank"):
        attach(AdapterConfig(method="lora", rank=32, alpha=8.0), model)


def test_double_attach_rejected():
    _, adapted = fresh_pair("lora")
    with pytest.raises(ConfigError, match="already"):
        attach(AdapterConfig(method="lora", rank=2), adapted)


def test_config_validation():
    with pytest.raises(ConfigError):
        AdapterConfig(method="vera")
    with pytest.raises(ConfigError):
        AdapterConfig(rank=0)
    with pytest.raises(ConfigError):
        AdapterConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        AdapterConfig(targets=("q", "q"))
    with pytest.raises(ConfigError):
        AdapterConfig(targets=("x",))


def test_presets_for_data_regimes():
    few = preset_for_shots(10)
    assert (few.rank, few.alpha, few.dropout) == (4, 8.0, 0.20)
    large = preset_for_shots(58)
    assert (large.rank, large.alpha, large.dropout) == (8, 16.0, 0.10)


def test_near_square_split():
    assert near_square_split(1024) == (32, 32)
    assert near_square_split(32) == (4, 8)
    assert near_square_split(7) == (1, 7)


@pytest.mark.parametrize("method", ALL_METHODS)
def test_adapter_tensor_roundtrip(method):
    _, adapted = fresh_pair(method)
    train_steps(adapted, steps=5)
    tensors = extract_adapter_tensors(adapted)
    assert all(name.startswith("adapter.") for name in tensors)

    _, fresh = fresh_pair(method)
    load_adapter_tensors(fresh, tensors)
    image = torch.rand(16, 16, 1)
    assert torch.equal(fresh.encode(image), adapted.encode(image))
