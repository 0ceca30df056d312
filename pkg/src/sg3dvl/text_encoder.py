"""Closed-vocabulary tokenizer and GRU text encoder (word + sentence features)."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

PAD_WORD = "pad"
UNK_WORD = "unk"


class Vocabulary:
    """Word <-> id map with dense ids; 'pad' and 'unk' reserved."""

    def __init__(self, words: list[str]):
        all_words = [PAD_WORD, UNK_WORD] + [w for w in words if w not in (PAD_WORD, UNK_WORD)]
        if len(set(all_words)) != len(all_words):
            raise ValueError("duplicate words in vocabulary")
        self.words = all_words
        self.word_to_id = {w: i for i, w in enumerate(all_words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.word_to_id[PAD_WORD]

    @property
    def unk_id(self) -> int:
        return self.word_to_id[UNK_WORD]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words = Path(path).read_text().splitlines()
        vocab = cls.__new__(cls)
        vocab.words = words
        vocab.word_to_id = {w: i for i, w in enumerate(words)}
        return vocab


def tokenize(words, vocab: Vocabulary) -> list[int]:
    """Map words to ids; out-of-vocabulary words become 'unk'."""
    unk = vocab.unk_id
    return [vocab.word_to_id.get(w, unk) for w in words]


def pad_batch(token_id_lists: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length id lists into (B, L) with lengths (B,)."""
    lengths = torch.tensor([len(t) for t in token_id_lists], dtype=torch.long)
    max_len = int(lengths.max())
    out = torch.full((len(token_id_lists), max_len), pad_id, dtype=torch.long)
    for b, ids in enumerate(token_id_lists):
        out[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out, lengths


class TextEncoder(nn.Module):
    """Embedding table + unidirectional GRU.

    Returns word features F_w (B, L, C) zeroed past each length and the
    sentence feature F_s (B, C) taken at the last valid position.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 300, feat_dim: int = 256):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        self.gru = nn.GRU(embed_dim, feat_dim, batch_first=True)
        self.feat_dim = feat_dim

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor):
        if (lengths < 1).any():
            raise ValueError("zero-length sequence in batch")
        emb = self.embedding(token_ids)
        f_w, _ = self.gru(emb)
        B, L, _ = f_w.shape
        valid = (torch.arange(L, device=f_w.device)[None, :] < lengths[:, None])
        f_w = f_w * valid.unsqueeze(-1).to(f_w.dtype)
        idx = (lengths - 1).view(B, 1, 1).expand(B, 1, f_w.shape[-1])
        f_s = f_w.gather(1, idx).squeeze(1)
        return f_w, f_s
