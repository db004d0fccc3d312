"""Small shared helpers for the recurrent models (padding, masking, dropout)."""

from __future__ import annotations

import torch
from torch import nn


def pad_batch(seqs, pad_id: int):
    """Pad integer sequences to a (B, T) LongTensor plus a length vector.

    Every sequence must be nonempty.
    """
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    max_len = int(lengths.max())
    out = torch.full((len(seqs), max_len), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, lengths


def gather_final(outputs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Pick the hidden state at each sequence's last real position."""
    idx = (lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, outputs.size(-1))
    return outputs.gather(1, idx).squeeze(1)


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, T) boolean mask, True at real positions."""
    return torch.arange(max_len).unsqueeze(0) < lengths.unsqueeze(1)


def word_dropout_ids(ids, unk_id: int, rate: float, generator) -> list[list[int]]:
    """Replace each id with UNK at the given rate; identity when rate is 0."""
    if rate <= 0.0 or generator is None:
        return ids
    out = []
    for seq in ids:
        if not seq:
            out.append(seq)
            continue
        keep = torch.rand(len(seq), generator=generator) >= rate
        out.append([t if bool(k) else unk_id for t, k in zip(seq, keep)])
    return out


class UtteranceEncoder(nn.Module):
    """Embedding + GRU over one utterance; exposes per-token and final states."""

    def __init__(self, vocab_size: int, emb_size: int, hidden_size: int, pad_id: int):
        super().__init__()
        self.emb = nn.Embedding(vocab_size, emb_size, padding_idx=pad_id)
        self.rnn = nn.GRU(emb_size, hidden_size, batch_first=True)
        self.hidden_size = hidden_size

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        outputs, _ = self.rnn(self.emb(ids))
        return outputs, gather_final(outputs, lengths)


class SequenceDecoder(nn.Module):
    """Conditioned GRU decoder computing teacher-forced sequence NLL.

    The conditioning vector initializes the hidden state; targets get EOS
    appended and inputs are the BOS-shifted targets.
    """

    def __init__(self, emb: nn.Embedding, cond_dim: int, hidden_size: int, vocab_size: int):
        super().__init__()
        self.emb = emb
        self.init_proj = nn.Linear(cond_dim, hidden_size)
        self.rnn = nn.GRU(emb.embedding_dim, hidden_size, batch_first=True)
        self.out = nn.Linear(hidden_size, vocab_size)

    def sequence_nll(self, cond: torch.Tensor, target_ids, pad_id: int, bos_id: int, eos_id: int):
        """Per-sequence summed NLL of (targets + EOS); returns (B,) tensor."""
        targets = [list(s) + [eos_id] for s in target_ids]
        inputs = [[bos_id] + list(s) for s in target_ids]
        tgt, lengths = pad_batch(targets, pad_id)
        inp, _ = pad_batch(inputs, pad_id)
        h0 = torch.tanh(self.init_proj(cond)).unsqueeze(0)
        outputs, _ = self.rnn(self.emb(inp), h0)
        logp = torch.log_softmax(self.out(outputs), dim=-1)
        token_nll = -logp.gather(2, tgt.unsqueeze(2)).squeeze(2)
        mask = length_mask(lengths, tgt.size(1)).to(token_nll.dtype)
        return (token_nll * mask).sum(dim=1)
