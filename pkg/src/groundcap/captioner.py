"""Two-layer attention decoder for region-grounded captioning.

An attention LSTM watches the mean-pooled scene plus the previous word, a
single-query additive attention picks regions, and a language LSTM emits the
next-word logits. Decoding conventions: sequences are returned with their
BOS prefix and, when the model emits it, the EOS terminator; max_len caps the
total sequence length (BOS included). Attention rows are returned for every
generated or teacher-forced step and always sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .common import as_double_tensor, uniform_init
from .data import BOS, EOS
from .matcher import AttentionMatrix

__all__ = [
    "CaptionerConfig",
    "DecoderState",
    "UpDownCaptioner",
]


@dataclass
class CaptionerConfig:
    feature_embed_dim: int = 512
    word_embed_dim: int = 512
    hidden_dim: int = 512
    attention_dim: int = 512
    max_decode_len: int = 18  # total length cap, BOS and EOS included

    def validate(self) -> None:
        if min(
            self.feature_embed_dim,
            self.word_embed_dim,
            self.hidden_dim,
            self.attention_dim,
        ) < 1:
            raise ValueError("dimensions must be positive")
        if self.max_decode_len < 2:
            raise ValueError("max_decode_len must allow at least BOS plus one token")


@dataclass
class DecoderState:
    """Recurrent state for a batch of scenes.

    v_proj are the projected region features [B, k, d2]; v_mean their mean.
    h1/c1 belong to the attention LSTM, h2/c2 to the language LSTM.
    """

    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    v_proj: Tensor
    v_mean: Tensor

    @property
    def batch_size(self) -> int:
        return self.h1.shape[0]

    def select(self, idx: Tensor) -> "DecoderState":
        """Reorder/duplicate the batch (used by beam search)."""
        return DecoderState(
            h1=self.h1[idx],
            c1=self.c1[idx],
            h2=self.h2[idx],
            c2=self.c2[idx],
            v_proj=self.v_proj[idx],
            v_mean=self.v_mean[idx],
        )


class UpDownCaptioner(nn.Module):
    """Attention-LSTM / language-LSTM decoder over projected region features."""

    def __init__(self, vocab_size: int, feature_dim: int, cfg: CaptionerConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        d2, we, H, da = (
            cfg.feature_embed_dim,
            cfg.word_embed_dim,
            cfg.hidden_dim,
            cfg.attention_dim,
        )
        self.region_proj = nn.Linear(feature_dim, d2)
        self.embed = nn.Embedding(vocab_size, we)
        self.att_lstm = nn.LSTMCell(H + d2 + we, H)
        self.lang_lstm = nn.LSTMCell(d2 + H, H)
        # Single-query additive attention; the printed form carries no biases.
        self.att_region = nn.Linear(d2, da, bias=False)
        self.att_hidden = nn.Linear(H, da, bias=False)
        self.att_out = nn.Linear(da, 1, bias=False)
        self.out_proj = nn.Linear(H, vocab_size)
        g = torch.Generator().manual_seed(seed)
        uniform_init(self, g)
        self.double()

    # -- core stepping ----------------------------------------------------

    def init_state(self, features: np.ndarray | Tensor) -> DecoderState:
        """Fresh state for [B, k, d] (or a single [k, d]) feature tensor."""
        f = as_double_tensor(features)
        if f.ndim == 2:
            f = f.unsqueeze(0)
        v_proj = self.region_proj(f)
        B = f.shape[0]
        H = self.cfg.hidden_dim
        zeros = v_proj.new_zeros(B, H)
        return DecoderState(
            h1=zeros,
            c1=zeros.clone(),
            h2=zeros.clone(),
            c2=zeros.clone(),
            v_proj=v_proj,
            v_mean=v_proj.mean(dim=1),
        )

    def step(self, state: DecoderState, prev_tokens: Tensor) -> tuple[Tensor, Tensor, DecoderState]:
        """One decode step for a batch.

        prev_tokens is a long tensor [B]. Returns (logits [B, V], beta [B, k],
        next state). beta is the region attention of this step.
        """
        y = self.embed(prev_tokens)
        att_in = torch.cat([state.h2, state.v_mean, y], dim=1)
        h1, c1 = self.att_lstm(att_in, (state.h1, state.c1))
        z = self.att_out(
            torch.tanh(self.att_region(state.v_proj) + self.att_hidden(h1).unsqueeze(1))
        ).squeeze(2)  # [B, k]
        beta = torch.softmax(z, dim=1)
        v_hat = torch.einsum("bk,bkd->bd", beta, state.v_proj)
        h2, c2 = self.lang_lstm(torch.cat([v_hat, h1], dim=1), (state.h2, state.c2))
        logits = self.out_proj(h2)
        next_state = DecoderState(h1, c1, h2, c2, state.v_proj, state.v_mean)
        return logits, beta, next_state

    # -- teacher forcing ---------------------------------------------------

    def teacher_forced(
        self, features: np.ndarray | Tensor, token_ids: Sequence[int]
    ) -> tuple[Tensor, Tensor]:
        """Log-probs of each next token and per-step betas for one caption.

        token_ids must be a wrapped [BOS, ..., EOS] sequence of length n + 2;
        the outputs have n + 1 rows (targets are token_ids[1:]).
        """
        tokens = torch.tensor([token_ids], dtype=torch.long)
        logprobs, betas, _ = self.teacher_forced_batch(
            as_double_tensor(features).unsqueeze(0),
            tokens,
            torch.tensor([len(token_ids)]),
        )
        return logprobs[0], betas[0]

    def teacher_forced_batch(
        self, features: Tensor, tokens: Tensor, lengths: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Batched teacher forcing over padded wrapped sequences.

        tokens is [B, L] long (PAD after each sequence's EOS), lengths the true
        wrapped lengths. Returns (logprobs [B, L-1], betas [B, L-1, k],
        mask [B, L-1]) where mask selects real steps; padded steps carry no
        loss and their beta rows are uniform placeholders.
        """
        if tokens.ndim != 2:
            raise ValueError("tokens must be [B, L]")
        if (tokens[:, 0] != BOS).any():
            raise ValueError("every sequence must start with BOS")
        B, L = tokens.shape
        state = self.init_state(features)
        step_lp, step_beta = [], []
        for t in range(L - 1):
            logits, beta, state = self.step(state, tokens[:, t])
            lp = torch.log_softmax(logits, dim=1)
            step_lp.append(lp.gather(1, tokens[:, t + 1].unsqueeze(1)).squeeze(1))
            step_beta.append(beta)
        logprobs = torch.stack(step_lp, dim=1)
        betas = torch.stack(step_beta, dim=1)
        steps = torch.arange(L - 1).unsqueeze(0)
        mask = steps < (lengths - 1).unsqueeze(1)
        return logprobs, betas, mask

    def teacher_forced_forward(
        self, features: np.ndarray | Tensor, token_ids: Sequence[int]
    ) -> tuple[np.ndarray, AttentionMatrix]:
        """Inspection variant: numpy log-probs plus a checked attention matrix."""
        with torch.no_grad():
            logprobs, betas = self.teacher_forced(features, token_ids)
        return logprobs.numpy(), AttentionMatrix(betas.numpy(), role="captioner-beta")

    # -- decoding -----------------------------------------------------------

    def _max_len(self, max_len: int | None) -> int:
        ml = self.cfg.max_decode_len if max_len is None else max_len
        if ml < 2:
            raise ValueError("max_len must allow at least BOS plus one token")
        return ml

    def greedy_decode(
        self, features: np.ndarray | Tensor, max_len: int | None = None
    ) -> tuple[list[int], AttentionMatrix]:
        """Argmax decoding; ties resolve to the lowest token id."""
        ml = self._max_len(max_len)
        state = self.init_state(features)
        tokens = [BOS]
        rows = []
        prev = torch.tensor([BOS])
        with torch.no_grad():
            while len(tokens) < ml:
                logits, beta, state = self.step(state, prev)
                tok = int(np.argmax(logits[0].numpy()))
                rows.append(beta[0].numpy())
                tokens.append(tok)
                if tok == EOS:
                    break
                prev = torch.tensor([tok])
        return tokens, AttentionMatrix(np.stack(rows), role="captioner-beta")

    def sample_decode(
        self,
        features: np.ndarray | Tensor,
        generator: torch.Generator,
        max_len: int | None = None,
    ) -> tuple[list[int], Tensor, AttentionMatrix]:
        """Ancestral sampling; returns differentiable per-step log-probs."""
        ml = self._max_len(max_len)
        state = self.init_state(features)
        tokens = [BOS]
        rows = []
        lps = []
        prev = torch.tensor([BOS])
        while len(tokens) < ml:
            logits, beta, state = self.step(state, prev)
            lp = torch.log_softmax(logits[0], dim=0)
            tok = int(torch.multinomial(lp.detach().exp(), 1, generator=generator).item())
            lps.append(lp[tok])
            rows.append(beta[0].detach().numpy())
            tokens.append(tok)
            if tok == EOS:
                break
            prev = torch.tensor([tok])
        return tokens, torch.stack(lps), AttentionMatrix(np.stack(rows), role="captioner-beta")

    def greedy_decode_batch(
        self, features: Tensor, max_len: int | None = None
    ) -> list[list[int]]:
        """Greedy decoding for a [B, k, d] batch; used for reward baselines."""
        ml = self._max_len(max_len)
        state = self.init_state(features)
        B = state.batch_size
        prev = torch.full((B,), BOS, dtype=torch.long)
        done = np.zeros(B, dtype=bool)
        seqs: list[list[int]] = [[BOS] for _ in range(B)]
        with torch.no_grad():
            for _ in range(ml - 1):
                logits, _, state = self.step(state, prev)
                picks = logits.numpy().argmax(axis=1)
                for b in range(B):
                    if done[b]:
                        continue
                    tok = int(picks[b])
                    seqs[b].append(tok)
                    if tok == EOS:
                        done[b] = True
                prev = torch.tensor(
                    [int(p) if not d else EOS for p, d in zip(picks, done)],
                    dtype=torch.long,
                )
                if done.all():
                    break
        return seqs

    def sample_decode_batch(
        self,
        features: Tensor,
        generator: torch.Generator,
        max_len: int | None = None,
    ) -> tuple[list[list[int]], Tensor, Tensor]:
        """Batched sampling; returns (sequences, logprobs [B, T], mask [B, T]).

        Log-probs after a sequence's EOS are masked out, so masked sums match
        the single-sequence sampler.
        """
        ml = self._max_len(max_len)
        state = self.init_state(features)
        B = state.batch_size
        prev = torch.full((B,), BOS, dtype=torch.long)
        alive = torch.ones(B, dtype=torch.bool)
        seqs: list[list[int]] = [[BOS] for _ in range(B)]
        lp_steps, mask_steps = [], []
        for _ in range(ml - 1):
            logits, _, state = self.step(state, prev)
            lp = torch.log_softmax(logits, dim=1)
            picks = torch.multinomial(lp.detach().exp(), 1, generator=generator).squeeze(1)
            lp_steps.append(lp.gather(1, picks.unsqueeze(1)).squeeze(1))
            mask_steps.append(alive.clone())
            for b in range(B):
                if alive[b]:
                    seqs[b].append(int(picks[b]))
            alive = alive & (picks != EOS)
            prev = picks
            if not alive.any():
                break
        return seqs, torch.stack(lp_steps, dim=1), torch.stack(mask_steps, dim=1)

    def beam_search(
        self,
        features: np.ndarray | Tensor,
        beam_size: int = 3,
        max_len: int | None = None,
    ) -> list[int]:
        """Beam search over summed log-probs, no length normalization.

        Ties break deterministically by (score, beam index, token id); with
        beam_size=1 this reduces exactly to greedy decoding.
        """
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        ml = self._max_len(max_len)
        base = self.init_state(features)
        if base.batch_size != 1:
            raise ValueError("beam search decodes one scene at a time")

        beams: list[tuple[float, list[int]]] = [(0.0, [BOS])]
        state = base
        finished: list[tuple[float, list[int]]] = []
        with torch.no_grad():
            while beams and len(beams[0][1]) < ml:
                prev = torch.tensor([b[1][-1] for b in beams], dtype=torch.long)
                logits, _, next_state = self.step(state, prev)
                lp = torch.log_softmax(logits, dim=1).numpy()
                candidates = [
                    (score + float(lp[bi, tok]), bi, tok)
                    for bi, (score, _) in enumerate(beams)
                    for tok in range(self.vocab_size)
                ]
                candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
                # Top beam_size expansions; EOS ones retire, shrinking the frontier.
                new_beams, keep_idx = [], []
                for cscore, bi, tok in candidates[:beam_size]:
                    seq = beams[bi][1] + [tok]
                    if tok == EOS:
                        finished.append((cscore, seq))
                    else:
                        new_beams.append((cscore, seq))
                        keep_idx.append(bi)
                if not new_beams:
                    beams = []
                    break
                state = next_state.select(torch.tensor(keep_idx, dtype=torch.long))
                beams = new_beams
        finished.extend(beams)  # hypotheses cut off at the length cap
        finished.sort(key=lambda c: (-c[0], c[1]))
        return finished[0][1]
