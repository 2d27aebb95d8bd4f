import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from oracles import cider_d_reference
from groundcap.captioner import CaptionerConfig, UpDownCaptioner
from groundcap.data import BOS, EOS, BoundingBox, CaptionRecord, SceneRecord
from groundcap.matcher import Matcher, MatcherConfig
from groundcap.objectives import (
    CiderContext,
    RewardConfig,
    RewardFn,
    Stage1Config,
    build_cider_context,
    build_gamma,
    cider_score,
    kl_attention_term,
    kl_rows,
    scst_gradient,
    stage1_loss,
    stage1_loss_batch,
)

torch.set_num_threads(1)

VOCAB = 8


def tiny_captioner(seed=0, vocab=VOCAB, feature_dim=3):
    cfg = CaptionerConfig(
        feature_embed_dim=4, word_embed_dim=3, hidden_dim=4, attention_dim=3, max_decode_len=8
    )
    return UpDownCaptioner(vocab, feature_dim, cfg, seed=seed)


def make_scene(k=3, d=3, seed=0, scene_id="train-00000"):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((k, d)).astype(np.float32)
    boxes = [BoundingBox(10.0 * r, 0.0, 10.0 * r + 8.0, 8.0) for r in range(k)]
    classes = [r if r < 2 else -1 for r in range(k)]
    return SceneRecord(scene_id, feats, boxes, classes)


def make_caption(scene, tokens, noun_positions, scene_regions):
    mask = [False] * len(tokens)
    grounding = {}
    for idx, region in zip(noun_positions, scene_regions):
        mask[idx] = True
        grounding[idx] = [scene.boxes[region]]
    return CaptionRecord("c0", scene.scene_id, "raw", tokens, mask, grounding)


class TestKL:
    def test_identical_rows_are_exactly_zero(self):
        assert kl_attention_term([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert kl_attention_term([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_known_value(self):
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert kl_attention_term([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected, abs=1e-12)

    def test_zero_student_entries_contribute_exactly_zero(self):
        assert kl_attention_term([1.0, 0.0], [0.5, 0.5]) == pytest.approx(
            math.log(2.0), abs=1e-15
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_attention_term([0.5, 0.5], [1.0])

    def test_batched_rows(self):
        s = torch.tensor([[0.5, 0.5], [1.0, 0.0]], dtype=torch.float64)
        t = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
        out = kl_rows(s, t)
        assert out[0].item() == 0.0
        assert out[1].item() == pytest.approx(math.log(2.0), abs=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 1.0, size=5)
        p /= p.sum()
        q = rng.uniform(0.05, 1.0, size=5)
        q /= q.sum()
        assert kl_attention_term(p, p) == 0.0
        kl = kl_attention_term(p, q)
        assert kl >= 0.0
        if np.abs(p - q).max() > 1e-3:
            assert kl > 0.0


class TestBuildGamma:
    def test_exact_match_region_is_positive(self):
        scene = make_scene()
        cap = make_caption(scene, [BOS, 4, EOS], [1], [0])
        gamma = build_gamma(scene, cap)
        np.testing.assert_array_equal(gamma[1], [1.0, 0.0, 0.0])

    def test_low_overlap_region_is_zero(self):
        scene = SceneRecord(
            "s",
            np.zeros((1, 3), dtype=np.float32),
            [BoundingBox(0, 0, 2, 2)],
            [0],
        )
        cap = CaptionRecord(
            "c", "s", "x", [BOS, 4, EOS], [False, True, False],
            {1: [BoundingBox(1, 1, 3, 3)]},
        )
        gamma = build_gamma(scene, cap)
        np.testing.assert_array_equal(gamma[1], [0.0])  # IoU = 1/7 < 0.5

    def test_no_overlap_gives_all_zero(self):
        scene = make_scene()
        cap = CaptionRecord(
            "c", scene.scene_id, "x", [BOS, 4, EOS], [False, True, False],
            {1: [BoundingBox(90, 90, 99, 99)]},
        )
        gamma = build_gamma(scene, cap)
        assert gamma[1].sum() == 0.0


class TestStage1:
    def setup_method(self):
        self.model = tiny_captioner(seed=5)
        self.scene = make_scene(seed=1)
        self.cap = make_caption(self.scene, [BOS, 4, 5, 6, EOS], [1, 3], [0, 1])

    def alpha_rows(self, kind="random", seed=0):
        n = len(self.cap.tokens)
        k = self.scene.num_regions
        if kind == "random":
            rng = np.random.default_rng(seed)
            rows = rng.uniform(0.1, 1.0, size=(n, k))
            return rows / rows.sum(axis=1, keepdims=True)
        raise ValueError(kind)

    def test_lambda_zero_is_exactly_cross_entropy(self):
        cfg = Stage1Config(lambda1=0.0, supervision="distill")
        loss, parts = stage1_loss(
            self.model, self.scene.features, self.cap, cfg, teacher_alpha=self.alpha_rows()
        )
        lp, _ = self.model.teacher_forced(self.scene.features, self.cap.tokens)
        assert loss.item() == (-lp.sum()).item()
        assert parts["transfer"] == 0.0

    def test_supervision_none_matches_lambda_zero_bitwise(self):
        a, _ = stage1_loss(
            self.model, self.scene.features, self.cap, Stage1Config(supervision="none")
        )
        b, _ = stage1_loss(
            self.model,
            self.scene.features,
            self.cap,
            Stage1Config(lambda1=0.0, supervision="distill"),
            teacher_alpha=self.alpha_rows(),
        )
        assert a.item() == b.item()

    def test_student_equal_teacher_gives_zero_transfer(self):
        with torch.no_grad():
            _, betas = self.model.teacher_forced(self.scene.features, self.cap.tokens)
        n = len(self.cap.tokens)
        alpha = np.zeros((n, self.scene.num_regions))
        for i in range(1, n):
            alpha[i] = betas[i - 1].numpy()
        alpha[0] = 1.0 / self.scene.num_regions
        cfg = Stage1Config(lambda1=0.1, supervision="distill")
        loss, parts = stage1_loss(
            self.model, self.scene.features, self.cap, cfg, teacher_alpha=alpha
        )
        assert parts["transfer"] == 0.0
        assert loss.item() == pytest.approx(parts["xe"], abs=1e-12)

    def test_distill_matches_scalar_oracle(self):
        alpha = self.alpha_rows(seed=3)
        cfg = Stage1Config(lambda1=0.1, supervision="distill")
        loss, _ = stage1_loss(
            self.model, self.scene.features, self.cap, cfg, teacher_alpha=alpha
        )
        with torch.no_grad():
            lp, betas = self.model.teacher_forced(self.scene.features, self.cap.tokens)
        expected = -lp.sum().item()
        for i in (1, 3):  # noun positions
            expected += 0.1 * kl_attention_term(betas[i - 1].numpy(), alpha[i])
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_gt_nll_matches_scalar_oracle(self):
        gamma = build_gamma(self.scene, self.cap)
        cfg = Stage1Config(lambda1=0.2, supervision="ground-truth", gt_form="nll")
        loss, _ = stage1_loss(self.model, self.scene.features, self.cap, cfg, gamma=gamma)
        with torch.no_grad():
            lp, betas = self.model.teacher_forced(self.scene.features, self.cap.tokens)
        expected = -lp.sum().item()
        for i in (1, 3):
            b = betas[i - 1].numpy()
            expected += 0.2 * sum(
                -g * math.log(max(bb, 1e-12)) for g, bb in zip(gamma[i], b)
            )
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_gt_kl_uses_normalized_indicators(self):
        gamma = {1: np.array([1.0, 1.0, 0.0]), 3: np.array([0.0, 1.0, 0.0])}
        cfg = Stage1Config(lambda1=0.1, supervision="ground-truth", gt_form="kl")
        loss, _ = stage1_loss(self.model, self.scene.features, self.cap, cfg, gamma=gamma)
        with torch.no_grad():
            lp, betas = self.model.teacher_forced(self.scene.features, self.cap.tokens)
        expected = (
            -lp.sum().item()
            + 0.1 * kl_attention_term(betas[0].numpy(), [0.5, 0.5, 0.0])
            + 0.1 * kl_attention_term(betas[2].numpy(), [0.0, 1.0, 0.0])
        )
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_empty_gamma_rows_are_skipped(self):
        gamma = {1: np.zeros(3), 3: np.zeros(3)}
        cfg = Stage1Config(lambda1=0.5, supervision="ground-truth")
        loss, parts = stage1_loss(self.model, self.scene.features, self.cap, cfg, gamma=gamma)
        assert parts["transfer"] == 0.0
        assert loss.item() == pytest.approx(parts["xe"], abs=1e-12)

    def test_missing_teacher_rejected(self):
        cfg = Stage1Config(lambda1=0.1, supervision="distill")
        with pytest.raises(ValueError):
            stage1_loss(self.model, self.scene.features, self.cap, cfg)

    def test_batch_matches_singles(self):
        model = self.model
        scenes = [make_scene(seed=s, scene_id=f"s{s}") for s in range(3)]
        caps = [
            make_caption(scenes[0], [BOS, 4, 5, EOS], [1], [0]),
            make_caption(scenes[1], [BOS, 6, 4, 7, EOS], [2], [1]),
            make_caption(scenes[2], [BOS, 5, EOS], [1], [0]),
        ]
        alphas = []
        rng = np.random.default_rng(0)
        for cap, scene in zip(caps, scenes):
            rows = rng.uniform(0.1, 1.0, size=(len(cap.tokens), scene.num_regions))
            alphas.append(rows / rows.sum(axis=1, keepdims=True))
        cfg = Stage1Config(lambda1=0.3, supervision="distill")

        L = max(len(c.tokens) for c in caps)
        k = scenes[0].num_regions
        tokens = torch.zeros((3, L), dtype=torch.long)
        rows_t = torch.zeros((3, L, k), dtype=torch.float64)
        valid = torch.zeros((3, L), dtype=torch.bool)
        feats = torch.stack([torch.tensor(s.features, dtype=torch.float64) for s in scenes])
        lengths = torch.tensor([len(c.tokens) for c in caps])
        for b, (cap, alpha) in enumerate(zip(caps, alphas)):
            tokens[b, : len(cap.tokens)] = torch.tensor(cap.tokens)
            rows_t[b, : len(cap.tokens)] = torch.tensor(alpha)
            for i, m in enumerate(cap.noun_mask):
                valid[b, i] = m
        batch_loss, _ = stage1_loss_batch(
            model, feats, tokens, lengths, cfg, supervision_rows=rows_t, supervision_valid=valid
        )
        singles = [
            stage1_loss(model, s.features, c, cfg, teacher_alpha=a)[0].item()
            for s, c, a in zip(scenes, caps, alphas)
        ]
        assert batch_loss.item() == pytest.approx(np.mean(singles), rel=1e-12)

    def test_gradients_match_finite_differences(self):
        alpha = self.alpha_rows(seed=7)
        cfg = Stage1Config(lambda1=0.1, supervision="distill")
        feats = torch.tensor(self.scene.features, dtype=torch.float64)

        def loss_fn():
            loss, _ = stage1_loss(self.model, feats, self.cap, cfg, teacher_alpha=alpha)
            return loss

        err = check_gradients(loss_fn, list(self.model.parameters()), h=1e-6)
        assert err < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            Stage1Config(supervision="other").validate()
        with pytest.raises(ValueError):
            Stage1Config(lambda1=-0.1).validate()
        with pytest.raises(ValueError):
            Stage1Config(gt_form="soft").validate()


class TestCider:
    def test_single_scene_corpus_degenerates_to_zero(self):
        refs = {"s0": [[4, 5, 6]]}
        ctx = build_cider_context(refs)
        assert ctx.score("s0", [4, 5, 6]) == 0.0

    def test_disjoint_ngrams_score_zero(self):
        refs = {"s0": [[4, 5]], "s1": [[6, 7]], "s2": [[8, 9]]}
        ctx = build_cider_context(refs)
        assert ctx.score("s0", [10, 11]) == 0.0

    def test_empty_candidate_scores_zero(self):
        refs = {"s0": [[4, 5]], "s1": [[6, 7]]}
        ctx = build_cider_context(refs)
        assert ctx.score("s0", []) == 0.0

    def test_identical_candidate_beats_partial_overlap(self):
        refs = {"s0": [[4, 5, 6, 7]], "s1": [[8, 9]], "s2": [[10, 4]]}
        ctx = build_cider_context(refs)
        exact = ctx.score("s0", [4, 5, 6, 7])
        partial = ctx.score("s0", [4, 5, 10, 11])
        assert exact > partial > 0.0

    def test_matches_brute_force_on_small_corpora(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n_scenes = int(rng.integers(2, 6))
            corpus = {}
            for s in range(n_scenes):
                refs = [
                    list(rng.integers(4, 10, size=rng.integers(1, 8)))
                    for _ in range(int(rng.integers(1, 4)))
                ]
                corpus[f"s{s}"] = refs
            ctx = build_cider_context(corpus)
            cand = list(rng.integers(4, 10, size=rng.integers(0, 8)))
            got = ctx.score("s0", cand)
            expected = cider_d_reference(cand, corpus["s0"], list(corpus.values()))
            assert got == pytest.approx(expected, abs=1e-9)

    def test_document_frequency_invariant_to_ordering(self):
        refs = {"a": [[4, 5], [5, 6]], "b": [[6, 7]], "c": [[4, 5, 6]]}
        ctx1 = build_cider_context(refs)
        shuffled = {
            "c": [[4, 5, 6]],
            "a": [[5, 6], [4, 5]],
            "b": [[6, 7]],
        }
        ctx2 = build_cider_context(shuffled)
        assert ctx1.doc_freq == ctx2.doc_freq
        assert ctx1.score("a", [4, 5, 6]) == ctx2.score("a", [4, 5, 6])

    def test_length_penalty_reduces_score(self):
        refs = {"s0": [[4, 5, 6]], "s1": [[7, 8]], "s2": [[9, 4]]}
        ctx = build_cider_context(refs)
        short = ctx.score("s0", [4, 5, 6])
        padded = ctx.score("s0", [4, 5, 6, 11, 11, 11, 11, 11])
        assert padded < short

    def test_unknown_scene_raises(self):
        ctx = build_cider_context({"s0": [[4]], "s1": [[5]]})
        with pytest.raises(KeyError):
            ctx.score("nope", [4])

    def test_standalone_function_signature(self):
        refs = {"s0": [[4, 5]], "s1": [[5, 6]]}
        ctx = build_cider_context(refs)
        direct = cider_score([4, 5], [(4, 5)], ctx.doc_freq, ctx.num_docs)
        assert direct == pytest.approx(ctx.score("s0", [4, 5]), abs=1e-12)


class TestReward:
    def make_reward(self, matcher_kind="scan", lambda2=1.0, use_cider=True):
        scene = make_scene(seed=2)
        refs = {scene.scene_id: [[4, 5, 6]], "other": [[6, 7]], "third": [[5, 4]]}
        ctx = build_cider_context(refs)
        matcher = None
        if matcher_kind != "none":
            mcfg = MatcherConfig(
                joint_dim=4,
                word_embed_dim=3,
                pos_restricted=(matcher_kind == "pos-scan"),
            )
            matcher = Matcher(VOCAB, 3, mcfg, seed=1)
        cfg = RewardConfig(use_cider=use_cider, lambda2=lambda2, matcher=matcher_kind)
        fn = RewardFn(cfg, cider_ctx=ctx, matcher=matcher, noun_ids=frozenset({4, 5}))
        return fn, scene, ctx, matcher

    def test_total_is_cider_plus_weighted_match(self):
        fn, scene, ctx, matcher = self.make_reward(lambda2=0.7)
        tokens = [BOS, 4, 5, 6, EOS]
        cider_part, match_part = fn.parts(scene, tokens)
        assert fn(scene, tokens) == pytest.approx(
            cider_part + 0.7 * match_part, abs=1e-12
        )
        assert cider_part == pytest.approx(ctx.score(scene.scene_id, [4, 5, 6]), abs=1e-12)
        mask = [t in {4, 5} for t in tokens]
        with torch.no_grad():
            expected_match = float(matcher.pair_score(scene.features, tokens, noun_mask=mask))
        assert match_part == pytest.approx(expected_match, abs=1e-12)

    def test_cider_only(self):
        fn, scene, ctx, _ = self.make_reward(matcher_kind="none")
        tokens = [BOS, 4, 5, EOS]
        assert fn(scene, tokens) == pytest.approx(
            ctx.score(scene.scene_id, [4, 5]), abs=1e-12
        )

    def test_pos_matcher_skips_noun_free_captions(self):
        fn, scene, _, _ = self.make_reward(matcher_kind="pos-scan")
        tokens = [BOS, 6, 7, EOS]  # no noun ids
        cider_part, match_part = fn.parts(scene, tokens)
        assert match_part == 0.0
        assert fn.no_noun_count == 1
        fn(scene, tokens)
        assert fn.no_noun_count == 2

    def test_monotonic_in_match_score(self):
        fn, scene, _, _ = self.make_reward(lambda2=2.0)
        tokens = [BOS, 4, 5, 6, EOS]
        c, m = fn.parts(scene, tokens)
        assert fn(scene, tokens) == pytest.approx(c + 2.0 * m, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(use_cider=False, matcher="none").validate()
        with pytest.raises(ValueError):
            RewardConfig(matcher="bm25").validate()
        with pytest.raises(ValueError):
            RewardConfig(lambda2=-1.0).validate()

    def test_variant_mismatch_rejected(self):
        mcfg = MatcherConfig(joint_dim=4, word_embed_dim=3, pos_restricted=True)
        matcher = Matcher(VOCAB, 3, mcfg, seed=0)
        ctx = build_cider_context({"s": [[4]], "t": [[5]]})
        with pytest.raises(ValueError):
            RewardFn(RewardConfig(matcher="scan"), cider_ctx=ctx, matcher=matcher)


class TestScstGradient:
    def test_zero_advantage_gives_zero_gradients(self):
        model = tiny_captioner(seed=3)
        feats = np.random.default_rng(1).standard_normal((2, 3))
        g = torch.Generator().manual_seed(0)
        grads, info = scst_gradient(model, feats, lambda toks: 1.0, g, max_len=5)
        assert info["advantage"] == 0.0
        for name, grad in grads.items():
            assert torch.equal(grad, torch.zeros_like(grad)), name

    def test_degenerate_policy_has_zero_advantage(self):
        model = tiny_captioner(seed=4)
        with torch.no_grad():
            model.out_proj.weight.zero_()
            model.out_proj.bias.fill_(-50.0)
            model.out_proj.bias[EOS] = 50.0
        feats = np.random.default_rng(2).standard_normal((2, 3))
        g = torch.Generator().manual_seed(1)
        grads, info = scst_gradient(
            model, feats, lambda toks: float(len(toks)), g, max_len=6
        )
        assert info["sample_tokens"] == info["greedy_tokens"] == [BOS, EOS]
        assert info["advantage"] == 0.0
        for grad in grads.values():
            assert torch.equal(grad, torch.zeros_like(grad))

    def test_covers_every_parameter(self):
        model = tiny_captioner(seed=5)
        feats = np.random.default_rng(3).standard_normal((2, 3))
        g = torch.Generator().manual_seed(2)
        grads, _ = scst_gradient(
            model, feats, lambda toks: float(len(toks)), g, max_len=6
        )
        assert set(grads) == {n for n, _ in model.named_parameters()}

    def test_reproducible_given_generator_state(self):
        model = tiny_captioner(seed=6)
        feats = np.random.default_rng(4).standard_normal((2, 3))
        r = lambda toks: float(len(toks)) * 0.3
        g1, i1 = scst_gradient(model, feats, r, torch.Generator().manual_seed(9))
        g2, i2 = scst_gradient(model, feats, r, torch.Generator().manual_seed(9))
        assert i1["sample_tokens"] == i2["sample_tokens"]
        for name in g1:
            assert torch.equal(g1[name], g2[name])
