import math

import numpy as np
import pytest
import torch

from gradcheck import check_gradients
from groundcap.captioner import CaptionerConfig, UpDownCaptioner
from groundcap.data import BOS, EOS, PAD

torch.set_num_threads(1)

VOCAB = 6  # pad, bos, eos, unk, plus content tokens 4 and 5


def tiny_captioner(seed=0, vocab=VOCAB, feature_dim=3, **cfg_kwargs) -> UpDownCaptioner:
    cfg = CaptionerConfig(
        feature_embed_dim=4,
        word_embed_dim=3,
        hidden_dim=4,
        attention_dim=3,
        max_decode_len=8,
        **cfg_kwargs,
    )
    return UpDownCaptioner(vocab, feature_dim, cfg, seed=seed)


def rand_feats(k=2, d=3, seed=0):
    return np.random.default_rng(seed).standard_normal((k, d))


def force_token(model, token, value=50.0):
    """Pin the output distribution so `token` always wins."""
    with torch.no_grad():
        model.out_proj.weight.zero_()
        model.out_proj.bias.fill_(-value)
        model.out_proj.bias[token] = value


def suppress_reserved(model, value=1e9):
    """Drive pad/bos/unk logits low enough that exp underflows to zero."""
    with torch.no_grad():
        for tok in (0, 1, 3):
            model.out_proj.weight[tok].zero_()
            model.out_proj.bias[tok] = -value


class TestInitState:
    def test_hidden_states_start_at_zero(self):
        m = tiny_captioner()
        st = m.init_state(rand_feats())
        for t in (st.h1, st.c1, st.h2, st.c2):
            assert torch.equal(t, torch.zeros_like(t))

    def test_projection_matches_loop_oracle(self):
        m = tiny_captioner(seed=2)
        f = rand_feats(k=3, d=3, seed=5)
        st = m.init_state(f)
        W = m.region_proj.weight.detach().numpy()
        b = m.region_proj.bias.detach().numpy()
        expected = np.stack([W @ row + b for row in f])
        np.testing.assert_allclose(st.v_proj[0].detach().numpy(), expected, rtol=1e-12)
        np.testing.assert_allclose(
            st.v_mean[0].detach().numpy(), expected.mean(axis=0), rtol=1e-12
        )


def manual_lstm_step(cell, x, h, c):
    """Independent LSTM recurrence in numpy (gate order i, f, g, o)."""
    W_ih = cell.weight_ih.detach().numpy()
    W_hh = cell.weight_hh.detach().numpy()
    b = cell.bias_ih.detach().numpy() + cell.bias_hh.detach().numpy()
    H = cell.hidden_size

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    gates = W_ih @ x + W_hh @ h + b
    i = sig(gates[:H])
    f = sig(gates[H : 2 * H])
    g = np.tanh(gates[2 * H : 3 * H])
    o = sig(gates[3 * H :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def manual_step(model, state_np, prev_token, v_proj, v_mean):
    """Full decode step in numpy: both LSTMs plus the additive attention."""
    h1, c1, h2, c2 = state_np
    y = model.embed.weight.detach().numpy()[prev_token]
    h1n, c1n = manual_lstm_step(model.att_lstm, np.concatenate([h2, v_mean, y]), h1, c1)
    Wv = model.att_region.weight.detach().numpy()
    Wh = model.att_hidden.weight.detach().numpy()
    wa = model.att_out.weight.detach().numpy()[0]
    z = np.array([wa @ np.tanh(Wv @ v + Wh @ h1n) for v in v_proj])
    ez = np.exp(z - z.max())
    beta = ez / ez.sum()
    v_hat = beta @ v_proj
    h2n, c2n = manual_lstm_step(model.lang_lstm, np.concatenate([v_hat, h1n]), h2, c2)
    logits = model.out_proj.weight.detach().numpy() @ h2n + model.out_proj.bias.detach().numpy()
    return logits, beta, (h1n, c1n, h2n, c2n)


class TestStep:
    def test_single_region_attention_is_one(self):
        m = tiny_captioner()
        st = m.init_state(rand_feats(k=1))
        _, beta, _ = m.step(st, torch.tensor([BOS]))
        np.testing.assert_allclose(beta.detach().numpy(), [[1.0]], atol=1e-12)

    def test_identical_regions_get_uniform_attention(self):
        m = tiny_captioner()
        f = np.tile(rand_feats(k=1, seed=3), (4, 1))
        st = m.init_state(f)
        _, beta, _ = m.step(st, torch.tensor([BOS]))
        np.testing.assert_allclose(beta.detach().numpy(), np.full((1, 4), 0.25), atol=1e-12)

    def test_two_steps_match_hand_unrolled_oracle(self):
        m = tiny_captioner(seed=9)
        f = rand_feats(k=2, d=3, seed=1)
        st = m.init_state(f)
        v_proj = st.v_proj[0].detach().numpy()
        v_mean = st.v_mean[0].detach().numpy()
        H = m.cfg.hidden_dim
        np_state = tuple(np.zeros(H) for _ in range(4))

        prev = BOS
        for tok in (4, 5):
            logits, beta, st = m.step(st, torch.tensor([prev]))
            exp_logits, exp_beta, np_state = manual_step(m, np_state, prev, v_proj, v_mean)
            np.testing.assert_allclose(logits[0].detach().numpy(), exp_logits, rtol=1e-9)
            np.testing.assert_allclose(beta[0].detach().numpy(), exp_beta, rtol=1e-9)
            prev = tok

    def test_attention_rows_sum_to_one(self):
        m = tiny_captioner(seed=4)
        st = m.init_state(rand_feats(k=5, seed=2))
        _, beta, _ = m.step(st, torch.tensor([BOS]))
        assert beta[0].sum().item() == pytest.approx(1.0, abs=1e-12)
        assert (beta >= 0).all()


class TestTeacherForced:
    def test_zero_output_layer_gives_uniform_logprobs(self):
        m = tiny_captioner()
        with torch.no_grad():
            m.out_proj.weight.zero_()
            m.out_proj.bias.zero_()
        lp, betas = m.teacher_forced(rand_feats(), [BOS, 4, 5, EOS])
        np.testing.assert_allclose(
            lp.detach().numpy(), np.full(3, -math.log(VOCAB)), rtol=1e-12
        )
        assert betas.shape == (3, 2)

    def test_matches_step_by_step_composition(self):
        m = tiny_captioner(seed=6)
        f = rand_feats(seed=7)
        seq = [BOS, 5, 4, 4, EOS]
        lp, betas = m.teacher_forced(f, seq)
        st = m.init_state(f)
        for t in range(len(seq) - 1):
            logits, beta, st = m.step(st, torch.tensor([seq[t]]))
            expected = torch.log_softmax(logits[0], dim=0)[seq[t + 1]]
            assert lp[t].item() == pytest.approx(expected.item(), abs=1e-12)
            np.testing.assert_allclose(
                betas[t].detach().numpy(), beta[0].detach().numpy(), atol=1e-12
            )

    def test_batch_matches_singles(self):
        m = tiny_captioner(seed=8)
        feats = [rand_feats(seed=s) for s in range(3)]
        seqs = [[BOS, 4, EOS], [BOS, 5, 4, 5, EOS], [BOS, 4, 4, EOS]]
        L = max(len(s) for s in seqs)
        padded = torch.tensor([s + [PAD] * (L - len(s)) for s in seqs], dtype=torch.long)
        lengths = torch.tensor([len(s) for s in seqs])
        fb = torch.stack([torch.tensor(f) for f in feats])
        lp_b, betas_b, mask = m.teacher_forced_batch(fb, padded, lengths)
        for i, (f, seq) in enumerate(zip(feats, seqs)):
            lp_s, betas_s = m.teacher_forced(f, seq)
            n_steps = len(seq) - 1
            assert mask[i, :n_steps].all() and not mask[i, n_steps:].any()
            np.testing.assert_allclose(
                lp_b[i, :n_steps].detach().numpy(), lp_s.detach().numpy(), atol=1e-12
            )
            np.testing.assert_allclose(
                betas_b[i, :n_steps].detach().numpy(), betas_s.detach().numpy(), atol=1e-12
            )

    def test_requires_bos(self):
        m = tiny_captioner()
        with pytest.raises(ValueError):
            m.teacher_forced(rand_feats(), [4, 5, EOS])

    def test_inspection_variant_returns_checked_attention(self):
        m = tiny_captioner(seed=1)
        lp, att = m.teacher_forced_forward(rand_feats(), [BOS, 4, EOS])
        assert att.role == "captioner-beta"
        assert lp.shape == (2,)

    def test_nll_gradient_matches_finite_differences(self):
        m = tiny_captioner(seed=3)
        f = torch.tensor(rand_feats(k=2, d=3, seed=3))
        seq = [BOS, 4, 5, EOS]

        def loss_fn():
            lp, _ = m.teacher_forced(f, seq)
            return -lp.sum()

        err = check_gradients(loss_fn, list(m.parameters()), h=1e-6)
        assert err < 1e-4


class TestGreedy:
    def test_immediate_eos_gives_empty_caption(self):
        m = tiny_captioner()
        force_token(m, EOS)
        tokens, att = m.greedy_decode(rand_feats())
        assert tokens == [BOS, EOS]
        assert att.weights.shape[0] == 1

    def test_deterministic(self):
        m = tiny_captioner(seed=5)
        f = rand_feats(seed=9)
        a, _ = m.greedy_decode(f)
        b, _ = m.greedy_decode(f)
        assert a == b

    def test_respects_length_cap_without_eos(self):
        m = tiny_captioner()
        force_token(m, 4)
        tokens, att = m.greedy_decode(rand_feats(), max_len=6)
        assert tokens == [BOS, 4, 4, 4, 4, 4]
        assert att.weights.shape[0] == 5

    def test_uniform_logits_pick_lowest_token_id(self):
        m = tiny_captioner()
        with torch.no_grad():
            m.out_proj.weight.zero_()
            m.out_proj.bias.zero_()
        tokens, _ = m.greedy_decode(rand_feats(), max_len=4)
        assert tokens == [BOS, PAD, PAD, PAD]

    def test_matches_manual_argmax_rollout(self):
        m = tiny_captioner(seed=12)
        f = rand_feats(seed=4)
        tokens, att = m.greedy_decode(f)
        st = m.init_state(f)
        prev = BOS
        expected = [BOS]
        rows = []
        for _ in range(m.cfg.max_decode_len - 1):
            logits, beta, st = m.step(st, torch.tensor([prev]))
            tok = int(np.argmax(logits[0].detach().numpy()))
            rows.append(beta[0].detach().numpy())
            expected.append(tok)
            if tok == EOS:
                break
            prev = tok
        assert tokens == expected
        np.testing.assert_allclose(att.weights, np.stack(rows), atol=1e-12)

    def test_batch_greedy_matches_single(self):
        m = tiny_captioner(seed=13)
        feats = [rand_feats(seed=s) for s in range(4)]
        batch = m.greedy_decode_batch(torch.stack([torch.tensor(f) for f in feats]))
        for f, seq in zip(feats, batch):
            single, _ = m.greedy_decode(f)
            assert seq == single


class TestSample:
    def test_forced_distribution_matches_greedy(self):
        m = tiny_captioner(seed=1)
        force_token(m, 4)
        g = torch.Generator().manual_seed(0)
        tokens, lps, att = m.sample_decode(rand_feats(), g, max_len=5)
        greedy, _ = m.greedy_decode(rand_feats(), max_len=5)
        assert tokens == greedy
        assert lps.shape == (4,)
        assert att.weights.shape == (4, 2)

    def test_seeded_reproducibility(self):
        m = tiny_captioner(seed=2)
        f = rand_feats(seed=1)
        a, _, _ = m.sample_decode(f, torch.Generator().manual_seed(11))
        b, _, _ = m.sample_decode(f, torch.Generator().manual_seed(11))
        assert a == b

    def test_first_step_frequencies_match_softmax(self):
        # 1e5 single-step samples through the batched sampler; each token's
        # empirical rate must sit within 3 sigma of its softmax probability.
        m = tiny_captioner(seed=7)
        f = rand_feats(seed=2)
        st = m.init_state(f)
        with torch.no_grad():
            logits, _, _ = m.step(st, torch.tensor([BOS]))
            probs = torch.softmax(logits[0], dim=0)
        n = 100_000
        g = torch.Generator().manual_seed(3)
        feats = torch.tensor(f).unsqueeze(0).expand(n, -1, -1)
        seqs, _, _ = m.sample_decode_batch(feats, g, max_len=2)
        counts = np.bincount([s[1] for s in seqs], minlength=VOCAB)
        for tok in range(VOCAB):
            p = probs[tok].item()
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(counts[tok] - n * p) <= 3 * sigma + 1e-9

    def test_single_call_sampler_follows_same_distribution(self):
        m = tiny_captioner(seed=7)
        f = rand_feats(seed=2)
        st = m.init_state(f)
        with torch.no_grad():
            logits, _, _ = m.step(st, torch.tensor([BOS]))
            probs = torch.softmax(logits[0], dim=0).numpy()
        n = 3000
        g = torch.Generator().manual_seed(5)
        counts = np.zeros(VOCAB)
        for _ in range(n):
            tokens, _, _ = m.sample_decode(f, g, max_len=2)
            counts[tokens[1]] += 1
        for tok in range(VOCAB):
            p = probs[tok]
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(counts[tok] - n * p) <= 3 * sigma + 1e-9

    def test_batch_sampler_masks_after_eos(self):
        m = tiny_captioner(seed=3)
        feats = torch.stack([torch.tensor(rand_feats(seed=s)) for s in range(5)])
        g = torch.Generator().manual_seed(0)
        seqs, lps, mask = m.sample_decode_batch(feats, g, max_len=6)
        for b, seq in enumerate(seqs):
            steps = len(seq) - 1
            assert mask[b, :steps].all()
            assert not mask[b, steps:].any()
            if seq[-1] != EOS:
                assert len(seq) == 6

    def test_logprobs_are_differentiable(self):
        m = tiny_captioner(seed=3)
        g = torch.Generator().manual_seed(1)
        _, lps, _ = m.sample_decode(rand_feats(), g)
        loss = -lps.sum()
        grads = torch.autograd.grad(loss, list(m.parameters()), allow_unused=True)
        assert any(g is not None and g.abs().sum() > 0 for g in grads)


def enumerate_sequences(model, feats, max_len):
    """All terminal sequences (EOS or length cap) with exact log-probs."""
    results = []

    def walk(state, seq, logprob):
        if seq[-1] == EOS or len(seq) >= max_len:
            results.append((logprob, list(seq)))
            return
        logits, _, nxt = model.step(state, torch.tensor([seq[-1]]))
        lp = torch.log_softmax(logits[0], dim=0)
        for tok in range(model.vocab_size):
            p = float(lp[tok])
            if p < -1e8 or not math.isfinite(p):
                continue  # suppressed token
            walk(nxt, seq + [tok], logprob + p)

    with torch.no_grad():
        walk(model.init_state(feats), [BOS], 0.0)
    return results


class TestBeam:
    def test_beam_one_equals_greedy(self):
        for seed in (0, 5, 9):
            m = tiny_captioner(seed=seed)
            f = rand_feats(seed=seed)
            greedy, _ = m.greedy_decode(f)
            assert m.beam_search(f, beam_size=1) == greedy

    def test_matches_exhaustive_search(self):
        m = tiny_captioner(seed=21)
        suppress_reserved(m)
        f = rand_feats(seed=8)
        max_len = 4
        all_seqs = enumerate_sequences(m, f, max_len)
        best = max(all_seqs, key=lambda r: (r[0], [-t for t in r[1]]))
        got = m.beam_search(f, beam_size=6, max_len=max_len)
        assert got == best[1]

    def test_deterministic(self):
        m = tiny_captioner(seed=14)
        f = rand_feats(seed=3)
        assert m.beam_search(f, beam_size=3) == m.beam_search(f, beam_size=3)

    def test_rejects_bad_beam_size(self):
        with pytest.raises(ValueError):
            tiny_captioner().beam_search(rand_feats(), beam_size=0)
