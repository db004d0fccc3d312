"""Stage-2 response generation.

A hierarchical encoder (utterance LSTM into a dialogue-level GRU) reads the
flattened [KB ; context ; user query] sequence; the decoder mixes a
vocabulary softmax with attention-based copying over the flattened tokens,
gated against a learned sentinel.  Frozen stage-1 models supply discrete
code (or continuous) conditioning of the decoder's initial state.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._nn import length_mask, pad_batch
from .corpus import EOS, SYS, USR, Speaker, TrainingInstance, Vocab
from .errors import EmptyBatch, MissingCodes, MissingStage1, PluginLookupMiss
from .latent import LaedModel, LatentCode, LatentModel, LatentVariant

GATE_EPS = 1e-12


class ConditioningMode(enum.Enum):
    NONE = "none"
    ENCODER_CONCAT = "encoder_concat"
    CODE_CONCAT = "code_concat"
    VAE_CONCAT = "vae_concat"


class ExternalEncoderKind(enum.Enum):
    NONE = "none"
    STUB = "stub"
    PLUGIN = "plugin"


@dataclass
class GeneratorConfig:
    utterance_hidden: int = 256
    dialogue_hidden: int = 512
    decoder_hidden: int | None = None
    embedding_size: int = 128
    conditioning: ConditioningMode = ConditioningMode.NONE
    external_encoder: ExternalEncoderKind = ExternalEncoderKind.NONE
    external_dim: int = 32
    external_sidecar: str | None = None
    max_decode_len: int = 30

    def __post_init__(self):
        for name in ("utterance_hidden", "dialogue_hidden", "embedding_size", "external_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.decoder_hidden is None:
            self.decoder_hidden = self.dialogue_hidden
        if self.decoder_hidden < 1:
            raise ValueError("decoder_hidden must be >= 1")
        if self.conditioning is ConditioningMode.NONE and self.decoder_hidden != self.dialogue_hidden:
            raise ValueError("without conditioning the decoder size must match the dialogue encoder")


@dataclass
class Stage1Bundle:
    """Frozen stage-1 models available to the generator."""

    divae: LatentModel | None = None
    laed: LaedModel | None = None
    vae: LatentModel | None = None

    def modules(self) -> dict[str, nn.Module]:
        out = {}
        for name in ("divae", "laed", "vae"):
            module = getattr(self, name)
            if module is not None:
                out[name] = module
        return out


@dataclass
class ContextEncoding:
    """Flattened memory plus hierarchical summary for one training instance."""

    memory: torch.Tensor
    summary: torch.Tensor
    token_ids: torch.Tensor
    surface: tuple[str, ...]
    z_usr: LatentCode | None = None
    z_sys: LatentCode | None = None
    vae_z: torch.Tensor | None = None
    divae_enc: torch.Tensor | None = None
    laed_enc: torch.Tensor | None = None


@dataclass
class CopyState:
    """One decoding step's attention, gate, and output distributions."""

    alpha: torch.Tensor
    gate: torch.Tensor
    p_vocab: torch.Tensor
    surface: tuple[str, ...]
    sentinel: torch.Tensor
    p_ptr: dict[str, torch.Tensor] = field(default_factory=dict)

    def mixture(self, vocab: Vocab, force_gate: float | None = None) -> dict[str, float]:
        """Mixture over surface tokens: gate * vocab head + (1-gate) * pointer."""
        g = float(self.gate) if force_gate is None else float(force_gate)
        probs: dict[str, float] = {}
        for idx, token in enumerate(vocab.tokens):
            probs[token] = g * float(self.p_vocab[idx])
        for token, mass in self.p_ptr.items():
            probs[token] = probs.get(token, 0.0) + (1.0 - g) * float(mass)
        return probs


def utterance_hash(tokens) -> str:
    """Stable 64-bit hash of the space-joined tokens, as lowercase hex."""
    joined = " ".join(tokens).encode("utf-8")
    return hashlib.blake2b(joined, digest_size=8).hexdigest()


def external_encoder_embed(
    tokens,
    kind: ExternalEncoderKind,
    dim: int = 32,
    sidecar: str | None = None,
) -> np.ndarray:
    """Contextual-encoder stand-in: one vector per line of knowledge.

    STUB derives per-token pseudo-random vectors from a stable hash of the
    utterance, identical across runs and platforms.  PLUGIN returns the
    sidecar file's vectors for the utterance hash, verbatim.
    """
    tokens = list(tokens)
    if kind is ExternalEncoderKind.STUB:
        seed = int.from_bytes(
            hashlib.blake2b(" ".join(tokens).encode("utf-8"), digest_size=8).digest(), "big"
        )
        rng = np.random.default_rng(seed)
        return rng.standard_normal((len(tokens), dim))
    if kind is ExternalEncoderKind.PLUGIN:
        if sidecar is None:
            raise PluginLookupMiss("no sidecar file configured")
        key = utterance_hash(tokens)
        rows = []
        for lineno, line in enumerate(Path(sidecar).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] != key:
                continue
            vec_dim = int(parts[1])
            values = [float(v) for v in parts[2 : 2 + vec_dim]]
            if len(values) != vec_dim:
                raise PluginLookupMiss(f"sidecar line {lineno}: truncated vector")
            rows.append(values)
        if not rows:
            raise PluginLookupMiss(f"utterance hash {key} not in sidecar")
        return np.asarray(rows, dtype=np.float64)
    raise ValueError(f"external encoder kind {kind} has no embedding")


class GeneratorModel(nn.Module):
    """Hierarchical encoder-decoder with a pointer-sentinel copy head."""

    def __init__(self, vocab: Vocab, config: GeneratorConfig, stage1: Stage1Bundle | None = None):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.stage1 = stage1 or Stage1Bundle()
        self._stage1_modules = nn.ModuleDict(self.stage1.modules())

        V = len(vocab)
        emb_size = config.embedding_size
        hu, hc, hd = config.utterance_hidden, config.dialogue_hidden, config.decoder_hidden
        self.emb = nn.Embedding(V, emb_size, padding_idx=vocab.pad_id)
        self.utt_rnn = nn.LSTM(emb_size, hu, batch_first=True)
        self.ctx_rnn = nn.GRU(hu, hc, batch_first=True)
        self.dec_cell = nn.GRUCell(emb_size, hd)
        self.att_proj = nn.Linear(hd, hu)
        self.sentinel = nn.Parameter(torch.randn(hu) * 0.1)
        self.vocab_head = nn.Linear(hd + hu, V)

        if config.external_encoder is not ExternalEncoderKind.NONE:
            self.ext_proj = nn.Linear(hu + config.external_dim, hu)

        mode = config.conditioning
        self.code_shape: tuple[int, int] | None = None
        if mode is ConditioningMode.CODE_CONCAT:
            self._require_stage1(("divae", "laed"), mode)
            lc = self.stage1.divae.config
            self.code_shape = (lc.M, lc.K)
            in_dim = hc + 2 * lc.M * lc.K
            self.cond_proj = nn.Linear(in_dim, hd)
        elif mode is ConditioningMode.ENCODER_CONCAT:
            self._require_stage1(("divae", "laed"), mode)
            in_dim = (
                hc
                + self.stage1.divae.config.hidden_size
                + self.stage1.laed.config.context_hidden_size
            )
            self.cond_proj = nn.Linear(in_dim, hd)
        elif mode is ConditioningMode.VAE_CONCAT:
            self._require_stage1(("vae",), mode)
            self.cond_proj = nn.Linear(hc + self.stage1.vae.config.latent_dim, hd)

        self.to(torch.double)

    def _require_stage1(self, names, mode):
        for name in names:
            if getattr(self.stage1, name) is None:
                raise MissingStage1(f"conditioning mode {mode.value} needs stage-1 model {name!r}")

    def freeze_stage1(self):
        for module in self._stage1_modules.values():
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- flattening ---------------------------------------------------------

    def _segments(self, instance: TrainingInstance):
        """[(surface tokens, sentinel-wrapped?), ...] in flattening order."""
        segments: list[list[str]] = []
        if instance.kb:
            segments.append(list(instance.kb))
        for speaker, tokens in instance.context:
            sentinel = USR if speaker is Speaker.USER else SYS
            segments.append([sentinel] + list(tokens))
        segments.append(list(instance.x_usr))
        segments = [s for s in segments if s]
        if not segments:
            segments = [[EOS]]
        return segments

    def _external_vector(self, tokens) -> torch.Tensor:
        vecs = external_encoder_embed(
            tokens,
            self.config.external_encoder,
            self.config.external_dim,
            self.config.external_sidecar,
        )
        if vecs.shape[0] == 0:
            return torch.zeros(self.config.external_dim, dtype=torch.double)
        return torch.from_numpy(vecs.mean(axis=0)).to(torch.double)


def encode_context_batch(
    instances,
    model: GeneratorModel,
    stage1: Stage1Bundle | None = None,
) -> list[ContextEncoding]:
    """Encode a batch of instances with shared encoder invocations."""
    instances = list(instances)
    if not instances:
        raise EmptyBatch("no instances to encode")
    stage1 = stage1 if stage1 is not None else model.stage1
    vocab = model.vocab
    mode = model.config.conditioning

    all_segments: list[list[str]] = []
    owners: list[int] = []
    for b, instance in enumerate(instances):
        for seg in model._segments(instance):
            all_segments.append(seg)
            owners.append(b)
    ids = [vocab.encode_seq(seg) for seg in all_segments]
    padded, lengths = pad_batch(ids, vocab.pad_id)
    outputs, _ = model.utt_rnn(model.emb(padded))
    finals = outputs.gather(
        1, (lengths - 1).view(-1, 1, 1).expand(-1, 1, outputs.size(-1))
    ).squeeze(1)

    if model.config.external_encoder is not ExternalEncoderKind.NONE:
        ext = torch.stack([model._external_vector(seg) for seg in all_segments])
        finals = torch.tanh(model.ext_proj(torch.cat([finals, ext], dim=1)))

    per_instance_rows: list[list[int]] = [[] for _ in instances]
    for row, owner in enumerate(owners):
        per_instance_rows[owner].append(row)

    seg_seqs = [finals[rows] for rows in per_instance_rows]
    seg_lens = torch.tensor([len(rows) for rows in per_instance_rows], dtype=torch.long)
    max_segs = int(seg_lens.max())
    stacked = torch.zeros(len(instances), max_segs, finals.size(1), dtype=finals.dtype)
    for b, seq in enumerate(seg_seqs):
        stacked[b, : seq.size(0)] = seq
    ctx_out, _ = model.ctx_rnn(stacked)
    summaries = ctx_out.gather(
        1, (seg_lens - 1).view(-1, 1, 1).expand(-1, 1, ctx_out.size(-1))
    ).squeeze(1)

    encodings: list[ContextEncoding] = []
    for b, instance in enumerate(instances):
        rows = per_instance_rows[b]
        memory = torch.cat([outputs[r, : int(lengths[r])] for r in rows], dim=0)
        flat_ids = torch.cat([padded[r, : int(lengths[r])] for r in rows], dim=0)
        surface = tuple(t for r in rows for t in all_segments[r])
        encodings.append(
            ContextEncoding(
                memory=memory,
                summary=summaries[b],
                token_ids=flat_ids,
                surface=surface,
            )
        )

    if mode in (ConditioningMode.CODE_CONCAT, ConditioningMode.ENCODER_CONCAT):
        if stage1.divae is None or stage1.laed is None:
            raise MissingStage1(f"mode {mode.value} needs divae and laed models")
        usr_batch = [list(inst.x_usr) for inst in instances]
        ctx_batch = [
            list(inst.context) + [(Speaker.USER, tuple(inst.x_usr))] for inst in instances
        ]
        if mode is ConditioningMode.CODE_CONCAT:
            usr_codes = stage1.divae.encode_batch(usr_batch)
            sys_codes = stage1.laed.encode_batch(ctx_batch)
            for enc, zu, zs in zip(encodings, usr_codes, sys_codes):
                enc.z_usr = zu
                enc.z_sys = zs
        else:
            divae_vecs = stage1.divae.utterance_encodings(usr_batch)
            laed_vecs = stage1.laed.context_encodings(ctx_batch)
            for b, enc in enumerate(encodings):
                enc.divae_enc = divae_vecs[b]
                enc.laed_enc = laed_vecs[b]
    elif mode is ConditioningMode.VAE_CONCAT:
        if stage1.vae is None:
            raise MissingStage1("mode vae_concat needs a stage-1 vae model")
        mus = stage1.vae.posterior_means([list(inst.x_usr) for inst in instances])
        for b, enc in enumerate(encodings):
            enc.vae_z = mus[b]

    return encodings


def encode_context(
    instance: TrainingInstance,
    model: GeneratorModel,
    stage1: Stage1Bundle | None = None,
) -> ContextEncoding:
    """Flatten [KB ; sentinel-wrapped context turns ; user query] and encode it."""
    return encode_context_batch([instance], model, stage1)[0]


def _one_hot_code(code: LatentCode, K: int) -> torch.Tensor:
    idx = torch.tensor(code.values, dtype=torch.long)
    return torch.nn.functional.one_hot(idx, K).to(torch.double).flatten()


def condition_latent(
    model: GeneratorModel,
    summary: torch.Tensor,
    z_usr: LatentCode | None = None,
    z_sys: LatentCode | None = None,
    mode: ConditioningMode | None = None,
    vae_z: torch.Tensor | None = None,
    encoder_vecs: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Build the decoder initialization vector for the given conditioning mode.

    NONE returns the summary unchanged; the concat modes append the latent
    information and project to the decoder size.
    """
    mode = model.config.conditioning if mode is None else mode
    if mode is ConditioningMode.NONE:
        return summary
    if mode is ConditioningMode.CODE_CONCAT:
        if z_usr is None or z_sys is None:
            raise MissingCodes("code conditioning needs both z_usr and z_sys")
        _, K = model.code_shape
        parts = [summary, _one_hot_code(z_usr, K), _one_hot_code(z_sys, K)]
    elif mode is ConditioningMode.ENCODER_CONCAT:
        if encoder_vecs is None:
            raise MissingCodes("encoder conditioning needs stage-1 encoder outputs")
        parts = [encoder_vecs[0], encoder_vecs[1], summary]
    elif mode is ConditioningMode.VAE_CONCAT:
        if vae_z is None:
            raise MissingCodes("vae conditioning needs the continuous latent")
        parts = [summary, vae_z]
    else:
        raise ValueError(f"unknown conditioning mode {mode}")
    return torch.tanh(model.cond_proj(torch.cat(parts)))


def _decoder_init(model: GeneratorModel, encoding: ContextEncoding, mode=None) -> torch.Tensor:
    return condition_latent(
        model,
        encoding.summary,
        z_usr=encoding.z_usr,
        z_sys=encoding.z_sys,
        mode=mode,
        vae_z=encoding.vae_z,
        encoder_vecs=(
            (encoding.divae_enc, encoding.laed_enc)
            if encoding.divae_enc is not None
            else None
        ),
    )


def copy_distribution(state: torch.Tensor, encoding: ContextEncoding, model: GeneratorModel) -> CopyState:
    """Pointer-sentinel mixture pieces for one decoder state.

    The sentinel is appended to the attention scores; its softmax mass is
    the vocabulary gate, and the remaining mass renormalizes into the
    pointer distribution over flattened context positions.
    """
    query = torch.tanh(model.att_proj(state))
    scores = encoding.memory @ query
    sent_score = model.sentinel @ query
    full = torch.softmax(torch.cat([scores, sent_score.view(1)]), dim=0)
    gate = full[-1]
    alpha = full[:-1] / (1.0 - gate).clamp_min(GATE_EPS)
    attended = alpha @ encoding.memory
    p_vocab = torch.softmax(model.vocab_head(torch.cat([state, attended])), dim=0)
    p_ptr: dict[str, torch.Tensor] = {}
    for j, token in enumerate(encoding.surface):
        p_ptr[token] = p_ptr.get(token, 0.0) + alpha[j]
    return CopyState(
        alpha=alpha,
        gate=gate,
        p_vocab=p_vocab,
        surface=encoding.surface,
        sentinel=model.sentinel,
        p_ptr=p_ptr,
    )


def hred_step_loss(
    batch,
    model: GeneratorModel,
    stage1: Stage1Bundle | None = None,
    mode: ConditioningMode | None = None,
) -> torch.Tensor:
    """Teacher-forced per-token NLL of the responses under the copy mixture.

    Targets are the response tokens plus the closing EOS; the pointer path
    credits gold tokens wherever their surface occurs in the flattened
    context, so out-of-vocabulary KB values remain learnable.
    """
    batch = list(batch)
    if not batch:
        raise EmptyBatch("empty batch")
    encodings = encode_context_batch(batch, model, stage1)
    vocab = model.vocab

    targets_surface = [list(inst.x_sys) + [EOS] for inst in batch]
    target_ids = [vocab.encode_seq(t) for t in targets_surface]
    tgt, tgt_lens = pad_batch(target_ids, vocab.pad_id)
    inputs = [[vocab.bos_id] + ids[:-1] for ids in target_ids]
    inp, _ = pad_batch(inputs, vocab.pad_id)
    B, Tr = tgt.shape

    # An out-of-vocab gold token is its own surface type, distinct from UNK:
    # only the pointer path may credit it, exactly as at generation time.
    in_vocab = torch.zeros(B, Tr, dtype=torch.double)
    for b, tokens in enumerate(targets_surface):
        for t, token in enumerate(tokens):
            if token in vocab.index:
                in_vocab[b, t] = 1.0

    mem_lens = torch.tensor([e.memory.size(0) for e in encodings], dtype=torch.long)
    Tm = int(mem_lens.max())
    hu = encodings[0].memory.size(1)
    memory = torch.zeros(B, Tm, hu, dtype=torch.double)
    for b, e in enumerate(encodings):
        memory[b, : e.memory.size(0)] = e.memory
    mem_mask = length_mask(mem_lens, Tm)

    # (B, Tr, Tm) gold-surface occurrence map for the pointer path
    match = torch.zeros(B, Tr, Tm, dtype=torch.double)
    for b, e in enumerate(encodings):
        positions: dict[str, list[int]] = {}
        for j, token in enumerate(e.surface):
            positions.setdefault(token, []).append(j)
        for t, token in enumerate(targets_surface[b]):
            for j in positions.get(token, ()):
                match[b, t, j] = 1.0

    state = torch.stack([_decoder_init(model, e, mode) for e in encodings])
    emb_inp = model.emb(inp)
    neg_inf = torch.finfo(torch.double).min
    step_nll = []
    for t in range(Tr):
        state = model.dec_cell(emb_inp[:, t], state)
        query = torch.tanh(model.att_proj(state))
        scores = torch.bmm(memory, query.unsqueeze(2)).squeeze(2)
        scores = scores.masked_fill(~mem_mask, neg_inf)
        sent = (query @ model.sentinel).unsqueeze(1)
        full = torch.softmax(torch.cat([scores, sent], dim=1), dim=1)
        gate = full[:, -1]
        a_mem = full[:, :-1]
        alpha = a_mem / (1.0 - gate).clamp_min(GATE_EPS).unsqueeze(1)
        attended = torch.bmm(alpha.unsqueeze(1), memory).squeeze(1)
        p_vocab = torch.softmax(model.vocab_head(torch.cat([state, attended], dim=1)), dim=1)
        gold_vocab = p_vocab.gather(1, tgt[:, t : t + 1]).squeeze(1) * in_vocab[:, t]
        gold_ptr = (a_mem * match[:, t]).sum(dim=1)
        p_gold = gate * gold_vocab + gold_ptr
        step_nll.append(-torch.log(p_gold.clamp_min(1e-300)))
    nll = torch.stack(step_nll, dim=1)
    mask = length_mask(tgt_lens, Tr).to(torch.double)
    return (nll * mask).sum() / mask.sum()


def generate_response(
    instance: TrainingInstance,
    model: GeneratorModel,
    stage1: Stage1Bundle | None = None,
    mode: ConditioningMode | None = None,
    decoding: str = "greedy",
    max_len: int | None = None,
    force_gate: float | None = None,
) -> list[str]:
    """Greedy decode under the copy mixture; copied tokens keep their surface.

    Deterministic: ties break toward the lexicographically larger token.
    Stops at EOS or after max_len tokens.
    """
    if decoding != "greedy":
        raise ValueError("only greedy decoding is supported")
    max_len = model.config.max_decode_len if max_len is None else max_len
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            encoding = encode_context(instance, model, stage1)
            state = _decoder_init(model, encoding, mode)
            vocab = model.vocab
            prev = vocab.bos_id
            out: list[str] = []
            for _ in range(max_len):
                inp = model.emb(torch.tensor([prev]))
                state = model.dec_cell(inp, state.unsqueeze(0)).squeeze(0)
                cs = copy_distribution(state, encoding, model)
                mixture = cs.mixture(vocab, force_gate)
                token = max(mixture.items(), key=lambda kv: (kv[1], kv[0]))[0]
                if token == EOS:
                    break
                out.append(token)
                prev = vocab.encode(token)
            return out
    finally:
        model.train(was_training)
