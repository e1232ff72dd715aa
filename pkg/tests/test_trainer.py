import dataclasses
import json

import pytest
import torch

from fontnet import trainer as tr
from fontnet.errors import ConfigError, NonFiniteLoss, UnknownVariant

TINY = dict(resolution=32, embedding_dim=8, style_dim=8, base_channels=4, max_channels=8, batch_size=2,
            k_references=2, n_fonts=3, n_chars=6, n_train_chars=4, font_train_frac=1.0, steps=3)


def cfg(**kw):
    return tr.TrainConfig(**{**TINY, **kw})


def digests(model):
    return {k: tr.params_digest(m) for k, m in model.parameter_groups().items()}


def test_config_validation():
    with pytest.raises(UnknownVariant):
        cfg(ablation="nope")
    with pytest.raises(ConfigError):
        cfg(batch_size=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_dict({"bogus": 1})
    c = cfg(lambda_l1=3.0)
    assert tr.TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_ablation_inventories():
    n_style, n_content = 3, 4
    full = tr.build_ablation(cfg(), n_style, n_content)
    assert set(full.parameter_groups()) == {"separator", "generator_encoder", "generator_decoder", "style_affines", "discriminator"}
    nosep = tr.build_ablation(cfg(ablation="no_separator"), n_style, n_content)
    assert "separator" not in nosep.parameter_groups() and not nosep.has_separator
    plain = tr.build_ablation(cfg(ablation="plain_decoder"), n_style, n_content)
    assert "style_affines" not in plain.parameter_groups()
    assert not any("affines" in n for n, _ in plain.named_parameters())


def test_two_identical_states_give_identical_reports():
    a, b = tr.TrainState(cfg()), tr.TrainState(cfg())
    ra = [tr.train_step(a).as_dict() for _ in range(2)]
    rb = [tr.train_step(b).as_dict() for _ in range(2)]
    assert ra == rb


def test_no_separator_has_zero_style_terms():
    s = tr.TrainState(cfg(ablation="no_separator"))
    for _ in range(2):
        r = tr.train_step(s)
        assert r.g_style == 0 and r.enc_style == 0


def test_separator_untouched_when_style_weights_zero():
    s = tr.TrainState(cfg(lambda_gstyle=0.0, lambda_encstyle=0.0))
    before = tr.params_digest(s.model.style_encoder)
    for _ in range(2):
        tr.train_step(s)
    assert tr.params_digest(s.model.style_encoder) == before


def test_step_phases_touch_only_their_networks():
    s = tr.TrainState(cfg())
    inputs = tr.prepare_step(s)
    b = inputs.batch
    src, gt = s.images(b.sources), s.images(b.ground_truths)
    refs = s.images([r for it in b.references for r in it]).view(len(b), len(b.references[0]), 1, 32, 32)
    fc = torch.tensor([s.style_classes[f] for f in b.target_font_ids])
    cc = torch.tensor([s.content_classes[c] for c in b.target_char_ids])
    d0 = digests(s.model)
    tr.discriminator_step(s, src, refs, gt, fc, cc)
    d1 = digests(s.model)
    assert d1["discriminator"] != d0["discriminator"]
    assert all(d1[k] == d0[k] for k in d0 if k != "discriminator")
    tr.generator_step(s, inputs, src, refs, gt, fc, cc)
    d2 = digests(s.model)
    assert d2["discriminator"] == d1["discriminator"]
    assert d2["generator_decoder"] != d1["generator_decoder"] and d2["separator"] != d1["separator"]


def test_r1_reported_zero_iff_gamma_zero():
    assert tr.train_step(tr.TrainState(cfg(r1_gamma=0.0))).r1 == 0.0
    assert tr.train_step(tr.TrainState(cfg(r1_gamma=1.0))).r1 > 0.0


def test_mining_keeps_at_most_batch_size_valid_triplets():
    s = tr.TrainState(cfg(batch_size=3))
    inputs = tr.prepare_step(s)
    assert 1 <= len(inputs.triplets) <= 3
    for t in inputs.triplets:
        a, p, n = t.keys()
        assert a[0] == p[0] and a[1] != p[1] and n[1] == a[1] and n[0] != a[0]
    assert all(n is not None and n.font_id != f for n, f in zip(inputs.negatives, inputs.batch.target_font_ids))


def test_zero_steps_checkpoint_equals_init(tmp_path):
    state = tr.train(cfg(steps=0), out_dir=tmp_path)
    fresh = tr.TrainState(cfg(steps=0))
    assert digests(state.model) == digests(fresh.model)
    loaded = tr.TrainState.load(tmp_path / "checkpoint_final.pt")
    assert digests(loaded.model) == digests(fresh.model)
    assert (tmp_path / "train_log.jsonl").read_text() == ""


def test_checkpoint_round_trip_exact_forward(tmp_path):
    s = tr.TrainState(cfg())
    tr.train_step(s)
    s.save(tmp_path / "ck.pt")
    sidecar = json.loads((tmp_path / "ck.json").read_text())
    assert sidecar["step"] == 1 and sidecar["config"]["resolution"] == 32
    t = tr.TrainState.load(tmp_path / "ck.pt")
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    r = torch.rand(2, 2, 1, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(s.model.synthesize(x, r), t.model.synthesize(x, r))
        assert torch.equal(s.model.discriminator(x).style_logits, t.model.discriminator(x).style_logits)
    assert t.step == 1 and t.split == s.split


def test_training_log_and_determinism(tmp_path):
    c = cfg(steps=4, checkpoint_every=2)
    tr.train(c, out_dir=tmp_path / "a")
    tr.train(c, out_dir=tmp_path / "b")
    log_a = (tmp_path / "a" / "train_log.jsonl").read_bytes()
    assert log_a == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    rows = [json.loads(l) for l in log_a.decode().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert all(set(r) == set(tr.LOG_KEYS) for r in rows)
    assert (tmp_path / "a" / "checkpoint_000002.pt").exists() and (tmp_path / "a" / "checkpoint_000004.pt").exists()
    sa = torch.load(tmp_path / "a" / "checkpoint_final.pt", weights_only=False)
    sb = torch.load(tmp_path / "b" / "checkpoint_final.pt", weights_only=False)
    for k in ("separator", "generator_decoder", "discriminator"):
        assert all(torch.equal(sa[k][n], sb[k][n]) for n in sa[k])


def test_resume_equals_uninterrupted(tmp_path):
    full = tr.train(cfg(steps=4), out_dir=tmp_path / "full")
    tr.train(cfg(steps=2), out_dir=tmp_path / "part")
    resumed = tr.train(cfg(steps=4), out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_final.pt")
    assert digests(full.model) == digests(resumed.model)
    assert (tmp_path / "full" / "train_log.jsonl").read_bytes() == (tmp_path / "part" / "train_log.jsonl").read_bytes()
    for name in ("generator", "discriminator"):
        a = full.optimizers()[name].state_dict()["state"]
        b = resumed.optimizers()[name].state_dict()["state"]
        assert all(torch.equal(a[i]["exp_avg"], b[i]["exp_avg"]) for i in a)


def test_nonfinite_loss_aborts_with_dump(tmp_path, monkeypatch):
    monkeypatch.setattr(tr, "l1_loss", lambda gt, y: (gt - y).abs().mean() * float("nan"))
    s = tr.TrainState(cfg())
    with pytest.raises(NonFiniteLoss) as info:
        tr.train_step(s, dump_dir=tmp_path)
    assert info.value.dump_path.exists()


def test_nonfinite_report_raises_nonfinite_loss(tmp_path, monkeypatch):
    real = tr.generator_step

    def poisoned(*a, **k):
        out = real(*a, **k)
        return (out[0], float("nan")) + out[2:]

    monkeypatch.setattr(tr, "generator_step", poisoned)
    s = tr.TrainState(cfg())
    with pytest.raises(NonFiniteLoss) as info:
        tr.train_step(s, dump_dir=tmp_path)
    assert info.value.dump_path is not None and info.value.dump_path.exists()


def test_content_font_must_be_train_font():
    split = tr.TrainState(cfg(font_train_frac=0.67)).split
    with pytest.raises(ConfigError):
        tr.TrainState(cfg(font_train_frac=0.67, content_font=split.test_fonts[0]))
