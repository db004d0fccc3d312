"""Stage-1 unsupervised representation learning on the transfer corpus.

Three autoencoding variants over utterances (discrete reconstruction,
discrete skip-thought, continuous baseline) plus the context/policy model
that predicts the discrete system-action code from dialogue context.
Discrete sampling uses Gumbel-softmax with an optional straight-through
forward pass; the KL term is computed against the batch-aggregated
posterior, which keeps the discrete objective tractable and implicitly
preserves the code/input dependence a per-sample KL would penalize.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from ._nn import SequenceDecoder, UtteranceEncoder, pad_batch, word_dropout_ids
from .corpus import Corpus, Speaker, Vocab
from .errors import EmptyBatch, InvalidDistribution

MIN_BPR_BATCH = 8


class LatentVariant(enum.Enum):
    DI_VAE = "di_vae"
    DI_VST = "di_vst"
    VAE = "vae"


@dataclass
class LatentConfig:
    """Sizes and sampling knobs for the stage-1 models.

    M discrete variables with K classes each; temperature anneals linearly
    from `temperature` to `temperature_end` over `anneal_steps` steps.
    """

    M: int = 10
    K: int = 5
    temperature: float = 1.0
    temperature_end: float = 0.5
    anneal_steps: int = 1000
    hard: bool = True
    embedding_size: int = 32
    hidden_size: int = 64
    context_hidden_size: int = 64
    latent_dim: int = 16
    word_dropout: float = 0.2

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.temperature_end > self.temperature:
            raise ValueError("temperature_end must not exceed temperature")

    def tau_at(self, step: int) -> float:
        if self.anneal_steps <= 0 or step >= self.anneal_steps:
            return self.temperature_end
        frac = step / self.anneal_steps
        return self.temperature + frac * (self.temperature_end - self.temperature)


@dataclass(frozen=True)
class LatentCode:
    """M discrete values, each in [0, K)."""

    values: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.values)

    def __str__(self) -> str:
        return "-".join(str(v) for v in self.values)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    reconstruction_nll: torch.Tensor
    kl: torch.Tensor
    policy_nll: torch.Tensor | None = None

    # The objective's input/code mutual-information term is not computed
    # separately: regularizing the batch-averaged posterior toward the prior
    # (rather than each per-sample posterior) already leaves that dependence
    # unpenalized, so it is implicit in the kl field.
    mutual_information_note = "implicit in batch-aggregated posterior regularization"


def gumbel_softmax_sample(
    logits: torch.Tensor,
    tau: float,
    hard: bool = False,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Relaxed one-hot sample per K-vector of logits.

    With `hard`, the forward value is the exact one-hot at the sampled
    argmax while gradients follow the soft sample (straight-through).
    `noise` overrides the sampled Gumbel noise (tests, limit cases).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        noise = -torch.log(-torch.log(u + 1e-20) + 1e-20)
    y = torch.softmax((logits + noise) / tau, dim=-1)
    if not hard:
        return y
    index = y.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
    return y_hard + y - y.detach()


def bpr_kl(code_posteriors, prior) -> torch.Tensor:
    """KL between the batch-averaged posterior and the prior, summed over variables.

    `code_posteriors` is (N, M, K) (or (N, K) for a single variable);
    every row must sum to 1 and the prior must be strictly positive.
    Zero-probability entries contribute zero, so the result is always >= 0
    and exactly 0 when the averaged posterior equals the prior.
    """
    q = torch.as_tensor(code_posteriors, dtype=torch.double) \
        if not torch.is_tensor(code_posteriors) else code_posteriors
    if q.dim() == 2:
        q = q.unsqueeze(1)
    if q.dim() != 3:
        raise InvalidDistribution("code posteriors must be (N, M, K)")
    p = torch.as_tensor(prior, dtype=q.dtype) if not torch.is_tensor(prior) else prior
    if p.dim() == 1:
        p = p.unsqueeze(0).expand(q.size(1), -1)
    if p.shape != q.shape[1:]:
        raise InvalidDistribution(f"prior shape {tuple(p.shape)} does not match posteriors")
    with torch.no_grad():
        row_sums = q.sum(dim=-1)
        if bool((q < 0).any()) or bool(((row_sums - 1.0).abs() > 1e-6).any()):
            raise InvalidDistribution("posterior rows must be nonnegative and sum to 1")
        prior_sums = p.sum(dim=-1)
        if bool((p <= 0).any()) or bool(((prior_sums - 1.0).abs() > 1e-6).any()):
            raise InvalidDistribution("prior must be strictly positive and sum to 1")
    if q.size(0) < MIN_BPR_BATCH:
        warnings.warn(
            f"batch of {q.size(0)} is small for aggregate-posterior estimation",
            stacklevel=2,
        )
    q_agg = q.mean(dim=0)
    safe = q_agg.clamp_min(1e-300)
    terms = q_agg * (torch.log(safe) - torch.log(p))
    return terms.sum()


def uniform_prior(M: int, K: int) -> torch.Tensor:
    return torch.full((M, K), 1.0 / K, dtype=torch.double)


class LatentModel(nn.Module):
    """Recognition encoder plus variant-specific generator(s).

    DI_VAE reconstructs the input utterance from the discrete code; DI_VST
    reconstructs the previous and next utterances; VAE is the continuous
    baseline with mean/log-variance heads.
    """

    def __init__(self, vocab: Vocab, config: LatentConfig, variant: LatentVariant):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.variant = variant
        self.encoder = UtteranceEncoder(
            len(vocab), config.embedding_size, config.hidden_size, vocab.pad_id
        )
        code_dim = config.M * config.K
        if variant is LatentVariant.VAE:
            self.mu_head = nn.Linear(config.hidden_size, config.latent_dim)
            self.logvar_head = nn.Linear(config.hidden_size, config.latent_dim)
            self.decoder = SequenceDecoder(
                self.encoder.emb, config.latent_dim, config.hidden_size, len(vocab)
            )
        else:
            self.q_head = nn.Linear(config.hidden_size, code_dim)
            if variant is LatentVariant.DI_VAE:
                self.decoder = SequenceDecoder(
                    self.encoder.emb, code_dim, config.hidden_size, len(vocab)
                )
            else:
                self.prev_decoder = SequenceDecoder(
                    self.encoder.emb, code_dim, config.hidden_size, len(vocab)
                )
                self.next_decoder = SequenceDecoder(
                    self.encoder.emb, code_dim, config.hidden_size, len(vocab)
                )
        self.to(torch.double)

    def _encode_ids(self, utterances, generator=None):
        ids = [self.vocab.encode_seq(u) + [self.vocab.eos_id] for u in utterances]
        if self.training and self.config.word_dropout > 0:
            ids = word_dropout_ids(ids, self.vocab.unk_id, self.config.word_dropout, generator)
        padded, lengths = pad_batch(ids, self.vocab.pad_id)
        _, final = self.encoder(padded, lengths)
        return final

    def posterior_logits(self, utterances, generator=None) -> torch.Tensor:
        """(B, M, K) recognition logits for a batch of token sequences."""
        if self.variant is LatentVariant.VAE:
            raise ValueError("continuous variant has no discrete posterior")
        final = self._encode_ids(utterances, generator)
        return self.q_head(final).view(-1, self.config.M, self.config.K)

    def gaussian_params(self, utterances, generator=None):
        if self.variant is not LatentVariant.VAE:
            raise ValueError("only the continuous variant has Gaussian parameters")
        final = self._encode_ids(utterances, generator)
        return self.mu_head(final), self.logvar_head(final)

    def encode_batch(self, utterances) -> list[LatentCode]:
        """Deterministic argmax codes; no sampling, no dropout."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits = self.posterior_logits([list(u) for u in utterances])
                values = logits.argmax(dim=-1)
        finally:
            self.train(was_training)
        return [LatentCode(tuple(int(v) for v in row)) for row in values]

    def encode(self, utterance) -> LatentCode:
        """Deterministic argmax code for one utterance; no sampling, no dropout."""
        return self.encode_batch([utterance])[0]

    def utterance_encodings(self, utterances) -> torch.Tensor:
        """(B, hidden) recognition-encoder summaries, inference mode."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self._encode_ids([list(u) for u in utterances])
        finally:
            self.train(was_training)

    def posterior_means(self, utterances) -> torch.Tensor:
        """(B, latent_dim) posterior means of the continuous variant, inference mode."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                mu, _ = self.gaussian_params([list(u) for u in utterances])
                return mu
        finally:
            self.train(was_training)


class ContextTurnEncoder(nn.Module):
    """Hierarchical encoder: utterance GRU per turn, then a GRU over turns."""

    def __init__(self, vocab: Vocab, emb_size: int, utt_hidden: int, ctx_hidden: int):
        super().__init__()
        self.vocab = vocab
        self.utt = UtteranceEncoder(len(vocab), emb_size, utt_hidden, vocab.pad_id)
        self.ctx_rnn = nn.GRU(utt_hidden, ctx_hidden, batch_first=True)
        self.ctx_hidden = ctx_hidden

    def _turn_ids(self, speaker: Speaker, tokens) -> list[int]:
        from .corpus import SYS, USR

        sentinel = USR if speaker is Speaker.USER else SYS
        return [self.vocab.index[sentinel]] + self.vocab.encode_seq(tokens) + [self.vocab.eos_id]

    def forward(self, contexts, word_dropout: float = 0.0, generator=None) -> torch.Tensor:
        """(B, ctx_hidden) summaries; an empty context summarizes to zeros."""
        flat_ids: list[list[int]] = []
        owners: list[int] = []
        for b, context in enumerate(contexts):
            for speaker, tokens in context:
                flat_ids.append(self._turn_ids(speaker, tokens))
                owners.append(b)
        dtype = next(self.parameters()).dtype
        if not flat_ids:
            return torch.zeros(len(contexts), self.ctx_hidden, dtype=dtype)
        if word_dropout > 0:
            flat_ids = word_dropout_ids(flat_ids, self.vocab.unk_id, word_dropout, generator)
        padded, lengths = pad_batch(flat_ids, self.vocab.pad_id)
        _, turn_vecs = self.utt(padded, lengths)
        summaries = []
        for b, context in enumerate(contexts):
            rows = [i for i, o in enumerate(owners) if o == b]
            if not rows:
                summaries.append(torch.zeros(self.ctx_hidden, dtype=dtype))
                continue
            seq = turn_vecs[rows].unsqueeze(0)
            _, h = self.ctx_rnn(seq)
            summaries.append(h.squeeze(0).squeeze(0))
        return torch.stack(summaries)


class LaedModel(nn.Module):
    """Discrete skip-thought model plus a context policy over system codes.

    The policy head predicts the system response's discrete code from the
    dialogue context; a context-conditioned decoder reconstructs the
    response from (code, context summary).
    """

    def __init__(self, vocab: Vocab, config: LatentConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.vst = LatentModel(vocab, config, LatentVariant.DI_VST)
        self.context_encoder = ContextTurnEncoder(
            vocab, config.embedding_size, config.hidden_size, config.context_hidden_size
        )
        code_dim = config.M * config.K
        self.policy_head = nn.Linear(config.context_hidden_size, code_dim)
        self.response_decoder = SequenceDecoder(
            self.context_encoder.utt.emb,
            code_dim + config.context_hidden_size,
            config.hidden_size,
            len(vocab),
        )
        self.to(torch.double)

    def policy_logits(self, contexts, generator=None) -> torch.Tensor:
        dropout = self.config.word_dropout if self.training else 0.0
        summary = self.context_encoder(contexts, dropout, generator)
        return self.policy_head(summary).view(-1, self.config.M, self.config.K), summary

    def encode_batch(self, contexts) -> list[LatentCode]:
        """Deterministic argmax policy codes for a batch of contexts."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits, _ = self.policy_logits([list(c) for c in contexts])
                values = logits.argmax(dim=-1)
        finally:
            self.train(was_training)
        return [LatentCode(tuple(int(v) for v in row)) for row in values]

    def encode(self, context) -> LatentCode:
        """Deterministic argmax of the policy logits for one context."""
        return self.encode_batch([context])[0]

    def context_encodings(self, contexts) -> torch.Tensor:
        """(B, ctx_hidden) context summaries, inference mode."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self.context_encoder([list(c) for c in contexts])
        finally:
            self.train(was_training)


def _check_batch(batch):
    batch = list(batch)
    if not batch:
        raise EmptyBatch("empty batch")
    return batch


def di_vae_loss(
    batch,
    model: LatentModel,
    config: LatentConfig | None = None,
    generator: torch.Generator | None = None,
    tau: float | None = None,
) -> LossBreakdown:
    """Reconstruction NLL under a sampled code plus aggregate-posterior KL."""
    if model.variant is not LatentVariant.DI_VAE:
        raise ValueError("model variant must be DI_VAE")
    batch = _check_batch(batch)
    config = config or model.config
    tau = config.temperature if tau is None else tau
    logits = model.posterior_logits(batch, generator)
    posteriors = torch.softmax(logits, dim=-1)
    z = gumbel_softmax_sample(logits, tau, config.hard, generator)
    cond = z.view(z.size(0), -1)
    target_ids = [model.vocab.encode_seq(u) for u in batch]
    nll = model.decoder.sequence_nll(
        cond, target_ids, model.vocab.pad_id, model.vocab.bos_id, model.vocab.eos_id
    )
    recon = nll.mean()
    kl = bpr_kl(posteriors, uniform_prior(config.M, config.K))
    return LossBreakdown(total=recon + kl, reconstruction_nll=recon, kl=kl)


def di_vst_loss(
    batch,
    model: LatentModel,
    config: LatentConfig | None = None,
    generator: torch.Generator | None = None,
    tau: float | None = None,
) -> LossBreakdown:
    """Neighbor-reconstruction NLL from the input's code plus aggregate KL.

    `batch` holds (x_prev, x, x_next) triples; a missing neighbor is the
    null utterance, which decodes to the empty sequence.
    """
    if model.variant is not LatentVariant.DI_VST:
        raise ValueError("model variant must be DI_VST")
    batch = _check_batch(batch)
    config = config or model.config
    tau = config.temperature if tau is None else tau
    prev_seqs = [p if p is not None else [] for p, _, _ in batch]
    mids = [x for _, x, _ in batch]
    next_seqs = [n if n is not None else [] for _, _, n in batch]
    logits = model.posterior_logits(mids, generator)
    posteriors = torch.softmax(logits, dim=-1)
    z = gumbel_softmax_sample(logits, tau, config.hard, generator)
    cond = z.view(z.size(0), -1)
    vocab = model.vocab
    prev_nll = model.prev_decoder.sequence_nll(
        cond, [vocab.encode_seq(s) for s in prev_seqs], vocab.pad_id, vocab.bos_id, vocab.eos_id
    )
    next_nll = model.next_decoder.sequence_nll(
        cond, [vocab.encode_seq(s) for s in next_seqs], vocab.pad_id, vocab.bos_id, vocab.eos_id
    )
    recon = (prev_nll + next_nll).mean()
    kl = bpr_kl(posteriors, uniform_prior(config.M, config.K))
    return LossBreakdown(total=recon + kl, reconstruction_nll=recon, kl=kl)


def vae_loss(
    batch,
    model: LatentModel,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Continuous baseline: reparameterized reconstruction plus analytic KL."""
    if model.variant is not LatentVariant.VAE:
        raise ValueError("model variant must be VAE")
    batch = _check_batch(batch)
    mu, logvar = model.gaussian_params(batch, generator)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + eps * torch.exp(0.5 * logvar)
    target_ids = [model.vocab.encode_seq(u) for u in batch]
    nll = model.decoder.sequence_nll(
        z, target_ids, model.vocab.pad_id, model.vocab.bos_id, model.vocab.eos_id
    )
    recon = nll.mean()
    kl_per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)
    kl = kl_per.mean()
    return LossBreakdown(total=recon + kl, reconstruction_nll=recon, kl=kl)


def laed_loss(
    batch,
    model: LaedModel,
    config: LatentConfig | None = None,
    generator: torch.Generator | None = None,
    tau: float | None = None,
) -> LossBreakdown:
    """Policy cross-entropy toward the sampled response code plus response NLL.

    `batch` holds (context, x_sys) pairs; the policy target is the one-hot
    sampled from the recognition posterior of the gold response.
    """
    batch = _check_batch(batch)
    config = config or model.config
    tau = config.temperature if tau is None else tau
    contexts = [c for c, _ in batch]
    responses = [x for _, x in batch]
    q_logits = model.vst.posterior_logits(responses, generator)
    z = gumbel_softmax_sample(q_logits, tau, hard=True, generator=generator)
    target_idx = z.detach().argmax(dim=-1)
    policy, summary = model.policy_logits(contexts, generator)
    logp_policy = torch.log_softmax(policy, dim=-1)
    policy_nll = -logp_policy.gather(2, target_idx.unsqueeze(2)).squeeze(2).sum(dim=1)
    cond = torch.cat([z.view(z.size(0), -1), summary], dim=1)
    vocab = model.vocab
    recon_nll = model.response_decoder.sequence_nll(
        cond,
        [vocab.encode_seq(s) for s in responses],
        vocab.pad_id,
        vocab.bos_id,
        vocab.eos_id,
    )
    recon = recon_nll.mean()
    policy_term = policy_nll.mean()
    zero = torch.zeros((), dtype=recon.dtype)
    return LossBreakdown(
        total=recon + policy_term,
        reconstruction_nll=recon,
        kl=zero,
        policy_nll=policy_term,
    )


def encode_codes(model, utterance_or_context) -> LatentCode:
    """Deterministic argmax code from a trained model; pure in (weights, input)."""
    if isinstance(model, LaedModel):
        return model.encode(utterance_or_context)
    if isinstance(model, LatentModel):
        return model.encode(utterance_or_context)
    raise TypeError(f"cannot encode with {type(model).__name__}")


def corpus_utterances(corpus: Corpus) -> list[tuple[str, ...]]:
    """All turn token sequences, in corpus order (discrete autoencoder training data)."""
    return [turn.tokens for d in corpus.dialogues for turn in d.turns]


def corpus_vst_triples(corpus: Corpus) -> list[tuple]:
    """(previous, current, next) token triples per turn; None marks a dialogue boundary."""
    triples = []
    for d in corpus.dialogues:
        toks = [t.tokens for t in d.turns]
        for i, x in enumerate(toks):
            prev = toks[i - 1] if i > 0 else None
            nxt = toks[i + 1] if i + 1 < len(toks) else None
            triples.append((prev, x, nxt))
    return triples


def corpus_laed_pairs(corpus: Corpus) -> list[tuple]:
    """(context, system response) pairs: every system turn with its full history."""
    pairs = []
    for d in corpus.dialogues:
        for i, turn in enumerate(d.turns):
            if turn.speaker is Speaker.SYSTEM:
                context = [(t.speaker, t.tokens) for t in d.turns[:i]]
                pairs.append((context, turn.tokens))
    return pairs


def cluster_by_code(corpus: Corpus, model: LatentModel) -> dict[LatentCode, list[str]]:
    """Bucket every utterance of the corpus by its argmax code, largest first."""
    buckets: dict[LatentCode, list[str]] = {}
    for dialogue in corpus.dialogues:
        for turn in dialogue.turns:
            code = model.encode(turn.tokens)
            buckets.setdefault(code, []).append(turn.text)
    ordered = sorted(buckets.items(), key=lambda kv: (-len(kv[1]), kv[0].values))
    return dict(ordered)
