import math

import numpy as np
import pytest

from sparsegan import diffcore as dc
from sparsegan.corpus import ConfigError, Corpus, Vocab, sentences_to_corpus
from sparsegan.diffcore import DimensionError, Tensor
from sparsegan.experiments import TOY_CONFIG, pretrain_models, toy_data
from sparsegan.nets import Critic, make_encoder
from sparsegan.optim import Adam
from sparsegan.train import (GanTrainer, MetricsLog, Pretrained, TrainConfig, build_embedding, checksum,
                             gradient_penalty, interpolate, penalty_at, pretrain_dae, pretrain_generator,
                             train)


@pytest.fixture(scope="module")
def tiny_models(small_corpus):
    cfg = TrainConfig(d=8, L=3, batch=4, n_critic=2, critic_filters=6, max_iters=4, dae_epochs=1,
                      gen_epochs=1, lr_pretrain=1e-2, embed_std=1.0, checkpoint_every=2, seed=5)
    E = build_embedding(cfg, len(small_corpus.vocab))
    dae, _ = pretrain_dae(small_corpus, cfg, E)
    gen, _ = pretrain_generator(small_corpus, cfg, E)
    return Pretrained(cfg, E, dae, gen)


def trainer_for(models, corpus, **changes):
    m = models.clone()
    return GanTrainer(m.config.replace(**changes), corpus, m.dae, m.generator)


# config and log -----------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(lr_adv=0), dict(lr_pretrain=-1), dict(n_critic=0), dict(lam=-0.1),
                                 dict(encoder_kind="lasso"), dict(gp_space="latent"), dict(L=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_defaults_and_round_trip():
    c = TrainConfig()
    assert (c.lam, c.n_critic, c.lr_pretrain, c.lr_adv, c.batch, c.max_len, c.L, c.max_iters) == \
        (10.0, 5, 1e-3, 1e-4, 64, 40, 10, 20000)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-8)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})


def test_metrics_log_strictly_increasing(tmp_path):
    log = MetricsLog()
    log.append({"iter": 1, "wallclock": 0.5})
    with pytest.raises(ValueError):
        log.append({"iter": 1})
    log.write(tmp_path / "m.jsonl")
    assert MetricsLog.read(tmp_path / "m.jsonl").records == log.records
    assert log.without_wallclock() == [{"iter": 1}]


# pretraining ---------------------------------------------------------------------------------------

def test_dae_first_loss_near_uniform(small_corpus):
    # small embeddings give near-zero logits, so the first loss is about ln |V|
    cfg = TrainConfig(d=8, batch=16, dae_epochs=1, embed_std=0.01, seed=1)
    _, res = pretrain_dae(small_corpus, cfg)
    assert abs(res.losses[0] - math.log(len(small_corpus.vocab))) < 0.02


def test_dae_pretraining_is_deterministic(small_corpus, tiny_config):
    a = pretrain_dae(small_corpus, tiny_config)[1].losses
    b = pretrain_dae(small_corpus, tiny_config)[1].losses
    assert a == b


def test_pretraining_needs_a_corpus(tiny_config):
    with pytest.raises(ConfigError):
        pretrain_dae(None, tiny_config)
    E = build_embedding(tiny_config, 10)
    with pytest.raises(ConfigError):
        pretrain_generator(None, tiny_config, E)


def test_generator_memorises_small_corpus():
    # z is pure noise, so the word after the shared opening is a 1-in-10 guess;
    # every later word is fixed by its prefix. Long shared tails keep that one
    # unavoidable miss per sentence under 5% of the targets.
    tail = " ".join(f"t{j}" for j in range(28))
    lines = [f"start w{i} {tail}" for i in range(10)]
    corpus = sentences_to_corpus(lines)
    cfg = TrainConfig(d=16, batch=10, gen_epochs=150, lr_pretrain=1e-2, embed_std=1.0, seed=0)
    _, res = pretrain_generator(corpus, cfg, build_embedding(cfg, len(corpus.vocab)))
    assert res.accuracy >= 0.95


def test_generator_loss_decreases_on_toy_corpus():
    lines = toy_data(0, 200, 1)[0]
    cfg = TrainConfig(d=16, batch=8, gen_epochs=4, lr_pretrain=1e-2, embed_std=1.0, seed=0)
    _, res = pretrain_generator(lines, cfg, build_embedding(cfg, len(lines.vocab)))
    assert len(res.losses) >= 100
    assert np.mean(res.losses[90:100]) < np.mean(res.losses[:10])


def test_greedy_samples_stay_in_vocabulary(tiny_models, small_corpus):
    from sparsegan.experiments import generate_texts
    texts = generate_texts(tiny_models.generator, small_corpus.vocab, 20, 8, seed=0)
    allowed = set(small_corpus.vocab.itos) - {"<pad>", "<bos>", "<eos>"}
    assert all(w in allowed for t in texts for w in t)


# gradient penalty --------------------------------------------------------------------------------------

def linear_critic(w):
    W = Tensor(w)
    return lambda x: dc.sum_(dc.mul(x, dc.broadcast_to(W, x.shape)), (1, 2))


def test_penalty_linear_critic_closed_form(rng):
    for _ in range(20):
        w = rng.normal(size=(3, 4))
        S_r, S_g = rng.normal(size=(5, 3, 4)), rng.normal(size=(5, 3, 4))
        gp = gradient_penalty(S_r, S_g, linear_critic(w), 10.0, rng).item()
        assert abs(gp - 10.0 * (np.linalg.norm(w) - 1) ** 2) < 1e-8


def test_penalty_zero_for_unit_weight(rng):
    w = rng.normal(size=(3, 4))
    w /= np.linalg.norm(w)
    assert gradient_penalty(rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)),
                            linear_critic(w), 10.0, rng).item() < 1e-20


def test_penalty_matches_finite_difference_norms(rng):
    critic = Critic(rng, 3, n_filters=5, widths=(2,))
    pts = rng.normal(size=(4, 6, 3))
    h = 1e-6
    norms = []
    for x in pts:
        g = np.zeros_like(x)
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp.reshape(-1)[j] += h
            xm.reshape(-1)[j] -= h
            g.reshape(-1)[j] = (critic(Tensor(xp[None])).item() - critic(Tensor(xm[None])).item()) / (2 * h)
        norms.append(np.linalg.norm(g))
    oracle = 10.0 * np.mean((np.array(norms) - 1) ** 2)
    assert penalty_at(pts, critic, 10.0).item() == pytest.approx(oracle, rel=1e-4)


def test_penalty_is_differentiable_in_critic_parameters(rng):
    critic = Critic(rng, 3, n_filters=4, widths=(2,))
    gp = penalty_at(rng.normal(size=(3, 5, 3)), critic, 10.0)
    gp.backward()
    assert np.abs(critic.convs[0][0].grad).sum() > 0 and np.abs(critic.W.grad).sum() > 0


def test_penalty_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        gradient_penalty(np.zeros((2, 3, 4)), np.zeros((2, 4, 4)), linear_critic(np.ones((3, 4))))


def test_interpolation_is_per_sample():
    a, b = np.ones((2, 2, 1)), np.zeros((2, 2, 1))
    out = interpolate(a, b, np.array([0.25, 1.0]))
    assert out[:, :, 0].tolist() == [[0.25, 0.25], [1.0, 1.0]]


# adversarial iterations -----------------------------------------------------------------------------------

def test_critic_loss_zero_for_identical_sides(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus, lam=0.0)
    targets = tr.next_real_batch()
    H_r, S_r = tr.real_side(targets)
    tr.fake_side = lambda B, grad: (None, Tensor(S_r), Tensor(H_r))
    assert tr.critic_iteration(targets)["critic_loss"] == 0.0


def test_zero_critic_loss_is_penalty(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus)
    for p in tr.critic.params().values():
        p.data = np.zeros_like(p.data)
    out = tr.critic_iteration(tr.next_real_batch())
    assert out["wasserstein_estimate"] == 0.0
    assert out["critic_loss"] == out["penalty"] == pytest.approx(tr.config.lam)


def test_critic_iteration_touches_only_the_critic(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus)
    before = (checksum(tr.generator), checksum(tr.dae), tr.embedding.data.copy(), checksum(tr.critic))
    tr.critic_iteration(tr.next_real_batch())
    assert checksum(tr.generator) == before[0] and checksum(tr.dae) == before[1]
    np.testing.assert_array_equal(tr.embedding.data, before[2])
    assert checksum(tr.critic) != before[3]


def test_generator_iteration_touches_only_the_generator(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus)
    before = (checksum(tr.critic), checksum(tr.dae), checksum(tr.generator))
    tr.generator_iteration()
    assert checksum(tr.critic) == before[0] and checksum(tr.dae) == before[1]
    assert checksum(tr.generator) != before[2]


def test_zero_critic_gives_zero_generator_gradients(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus)
    for p in tr.critic.params().values():
        p.data = np.zeros_like(p.data)
    out = tr.generator_iteration()
    assert out["grad_norm_mean"] == 0.0
    assert all(not np.any(p.grad) for p in tr.opt_g.params.values())


def test_frozen_atoms_stay_fixed(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus, freeze_atoms=True)
    E0 = tr.embedding.data.copy()
    tr.step(0.0)
    np.testing.assert_array_equal(tr.embedding.data, E0)


def test_pad_row_never_moves(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus)
    tr.step(0.0)
    assert not tr.embedding.data[0].any()


def test_sign_convention_on_separable_case(rng):
    # real sequences repeat atom A, fake ones atom B; with no penalty the critic
    # loss is exactly minus the Wasserstein estimate, and training drives it down
    A, B = np.zeros(4), np.zeros(4)
    A[1], B[2] = 1.0, 1.0
    S_r, S_g = Tensor(np.tile(A, (6, 5, 1))), Tensor(np.tile(B, (6, 5, 1)))
    critic = Critic(rng, 4, n_filters=8, widths=(2,))
    opt = Adam(critic.params(), 1e-2)
    history = []
    for _ in range(30):
        opt.zero_grad()
        d_fake, d_real = dc.mean(critic(S_g)), dc.mean(critic(S_r))
        loss = d_fake - d_real
        assert loss.item() == pytest.approx(-(d_real.item() - d_fake.item()), abs=1e-15)
        history.append((loss.item(), d_real.item() - d_fake.item()))
        loss.backward()
        opt.step()
    assert history[-1][0] < history[0][0] and history[-1][1] > history[0][1]


def test_hidden_space_penalty(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus, gp_space="hidden")
    out = tr.critic_iteration(tr.next_real_batch())
    assert out["penalty"] >= 0 and math.isfinite(out["critic_loss"])


@pytest.mark.parametrize("kind", ["topk_static", "topk_dynamic", "none"])
def test_other_encoders_train(tiny_models, small_corpus, kind):
    tr = trainer_for(tiny_models, small_corpus, encoder_kind=kind)
    rec = tr.step(0.0)
    assert all(math.isfinite(rec[k]) for k in ("critic_loss", "gen_loss"))


def test_generator_step_descends_under_fixed_critic(tiny_models, small_corpus):
    tr = trainer_for(tiny_models, small_corpus, lr_adv=1e-3)

    def loss_on_fixed_noise():
        rng_state = tr.rng.bit_generator.state
        with dc.no_grad():
            _, S_g, _ = tr.fake_side(16, grad=False)
        tr.rng.bit_generator.state = rng_state
        return -float(np.mean(tr.critic(S_g).data))

    start = loss_on_fixed_noise()
    for _ in range(10):
        tr.generator_iteration()
    assert loss_on_fixed_noise() < start


# full loop ----------------------------------------------------------------------------------------------

def test_zero_iterations_write_initial_checkpoint(tiny_models, small_corpus, tmp_path):
    m = tiny_models.clone()
    _, log = train(m.config.replace(max_iters=0), small_corpus, m.dae, m.generator, tmp_path)
    assert len(log) == 0
    assert (tmp_path / "ckpt_000000.npz").exists() and (tmp_path / "final.npz").exists()
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_training_is_deterministic(tiny_models, small_corpus):
    logs = []
    for _ in range(2):
        m = tiny_models.clone()
        logs.append(train(m.config, small_corpus, m.dae, m.generator)[1].without_wallclock())
    assert logs[0] == logs[1] and len(logs[0]) == 4


def test_resume_matches_uninterrupted_run(tiny_models, small_corpus, tmp_path):
    m = tiny_models.clone()
    _, full = train(m.config.replace(max_iters=6), small_corpus, m.dae, m.generator, tmp_path / "a")
    m = tiny_models.clone()
    train(m.config.replace(max_iters=6), small_corpus, m.dae, m.generator, tmp_path / "b", until=2)
    m = tiny_models.clone()
    tr, resumed = train(m.config.replace(max_iters=6), small_corpus, m.dae, m.generator, tmp_path / "b",
                        resume_from=tmp_path / "b" / "ckpt_000002.npz")
    assert resumed.without_wallclock() == full.without_wallclock()
    lines_a = [r for r in MetricsLog.read(tmp_path / "a" / "metrics.jsonl").without_wallclock()]
    lines_b = [r for r in MetricsLog.read(tmp_path / "b" / "metrics.jsonl").without_wallclock()]
    assert lines_a == lines_b
    assert (tmp_path / "a" / "final.npz").read_bytes() != b""


def test_wallclock_budget_stops_early(tiny_models, small_corpus):
    m = tiny_models.clone()
    _, log = train(m.config.replace(max_iters=50, wallclock_budget=0.0), small_corpus, m.dae, m.generator)
    assert len(log) <= 1


def test_shared_embedding_required(tiny_models, small_corpus):
    a, b = tiny_models.clone(), tiny_models.clone()
    with pytest.raises(ValueError):
        GanTrainer(a.config, small_corpus, a.dae, b.generator)


def test_pretrained_round_trip(tiny_models, small_corpus, tmp_path):
    tiny_models.save(tmp_path / "p.npz", small_corpus.vocab)
    back, vocab, meta = Pretrained.load(tmp_path / "p.npz")
    assert vocab.itos == small_corpus.vocab.itos and meta["kind"] == "pretrained"
    assert checksum(back.dae) == checksum(tiny_models.dae)
    assert checksum(back.generator) == checksum(tiny_models.generator)


@pytest.mark.slow
def test_generator_loss_falls_within_fifty_toy_iterations():
    corpus, _, _ = toy_data(0)
    cfg = TOY_CONFIG.replace(seed=0, max_iters=50)
    models, _ = pretrain_models(corpus, cfg)
    _, log = train(cfg, corpus, models.dae, models.generator)
    assert log.records[-1]["gen_loss"] < log.records[0]["gen_loss"]
