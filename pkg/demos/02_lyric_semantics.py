"""
Lyric semantics at phoneme resolution
=====================================

Character vectors are expanded to the phoneme sequence: each pinyin syllable
covers N1 phonemes, slurred finals repeat (N2), and SP/AP rows get zeros.
"""
import numpy as np
import torch

from expressive_svs.corpus import PhonemeDict
from expressive_svs.semantic import (
    SemanticEncoder,
    SemanticEncoderConfig,
    StubProvider,
    WordEmbeddingSeq,
    build_expansion_plan,
    embed_words,
    encode_semantics,
    expand_embeddings,
)

pdict = PhonemeDict({"shi": ("sh", "i"), "a": ("a",)})
lexicon = {"是": "shi", "啊": "a"}

# the worked example: [sh, i, i, SP, a] -> [v1, v1, v1, 0, v2]
plan = build_expansion_plan("是啊", ["sh", "i", "i", "SP", "a"], lexicon, pdict)
print("N1", plan.n1, "N2", plan.n2, "rests", plan.rest_indices)
v = WordEmbeddingSeq(np.array([[1.0, 1.0], [2.0, 2.0]]), "是啊")
print(expand_embeddings(v, plan))

# the stub provider gives deterministic, context-dependent 768-d vectors
# (pass a local BERT directory to load_provider for real embeddings)
words = embed_words("是啊", StubProvider())
print(words.vectors.shape)

# standard order expands then encodes; reversed encodes then expands
for variant in ("standard", "reversed"):
    cfg = SemanticEncoderConfig(n_fft_blocks=2, block_dim=32, filter_dim=64, variant=variant)
    torch.manual_seed(0)
    enc = SemanticEncoder(cfg).eval()
    with torch.no_grad():
        h = encode_semantics(words.vectors, cfg, enc, plan)
    # the SP row enters as zeros; only the reversed order keeps it zero on the way out
    print(variant, tuple(h.shape), "SP row norm %.3f" % h[3].norm())
