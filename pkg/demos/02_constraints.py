"""
Attention constraints as losses
===============================

Two hinge losses act on a caption's attention over its own image.

Content re-sourcing splits the regions into attended and ignored groups and
asks the attended group to match the word better than the ignored one.
Content swapping replaces a word by an absent word and asks the attended
vector to prefer the original.
"""

import numpy as np

from ccattn import numkit as nk
from ccattn.attention import FragmentSet, attend
from ccattn.losses import LossConfig, SwapSample, ccr_loss, ccs_loss, partition_keys, sample_swap

rng = np.random.default_rng(0)
regions = FragmentSet(nk.tensor(rng.standard_normal((6, 4))), "image")
words = FragmentSet(nk.tensor(rng.standard_normal((3, 4))), "text", tokens=[2, 5, 7])
amap, info = attend(words, regions)

# %%
# The partition uses a strict threshold of one over the number of regions.
for i, part in enumerate(partition_keys(amap)):
    print(f"word {i}: attended {part.attended}, ignored {part.ignored}")

print("re-sourcing loss:", round(ccr_loss(words, amap, regions, gamma2=0.2).item(), 4))

# %%
# Swapping a word for itself leaves both similarities equal, so the hinge
# sits exactly at the margin.
same = SwapSample(index=0, token=2, embedding=nk.take(words.features, 0))
print("identity swap loss:", ccs_loss(words, info, same, gamma3=0.2).item())

# %%
# A real swap draws a token that is not in the caption.
vocab_table = rng.standard_normal((10, 4))
swap = sample_swap(words, range(10), rng, embed=lambda t: nk.tensor(vocab_table[t]))
print(f"swap word {swap.index} -> token {swap.token}:", round(ccs_loss(words, info, swap).item(), 4))

# %%
# With random features both hinges are already satisfied at margin 0.2.
# A wider margin makes them active, and the gradient flows into the words.
feats = nk.tensor(words.features.data, requires_grad=True)
words_g = FragmentSet(feats, "text", tokens=words.tokens)
amap_g, info_g = attend(words_g, regions)
cfg = LossConfig(gamma2=1.0, gamma3=1.0)
total = ccr_loss(words_g, amap_g, regions, cfg.gamma2) + ccs_loss(words_g, info_g, swap, cfg.gamma3)
print("loss at margin 1.0:", round(total.item(), 4))
nk.backward(total)
print("gradient norm per word:", np.round(np.linalg.norm(feats.grad, axis=1), 4))
