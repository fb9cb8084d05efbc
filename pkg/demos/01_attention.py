"""
Cross-modal attention on hand-made fragments
============================================

Words attend over image regions through a cosine relevance score and a
sharp softmax. This script builds three regions and two words by hand and
shows the weights, the attended vectors and the pair similarity.
"""

import numpy as np

from ccattn import numkit as nk
from ccattn.attention import AttentionConfig, FragmentSet, attend, pair_similarity, score_matrix

# Three regions: a "dog", a "ball", and a background patch leaning toward dog.
regions = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.6, 0.2, 0.8],
])
words = np.array([
    [1.0, 0.1, 0.0],  # dog
    [0.0, 1.0, 0.1],  # ball
])
image = FragmentSet(nk.tensor(regions), "image")
caption = FragmentSet(nk.tensor(words), "text", tokens=[0, 1])

# %%
# Weights per word. The inverse temperature controls how peaked they are.
for tinv in (1.0, 9.0):
    amap, info = attend(caption, image, temperature_inv=tinv)
    print(f"inverse temperature {tinv}:")
    print(np.round(amap.weights.data, 3))

# %%
# The pair score averages the cosine between each word and its attended
# vector; logsumexp pooling rewards the best-matched word more.
amap, info = attend(caption, image)
for agg in ("mean", "logsumexp"):
    print(agg, round(pair_similarity(caption, info, agg).item(), 4))

# %%
# A batch of images and captions gives an image x caption score matrix.
other_image = FragmentSet(nk.tensor(np.array([[0.0, 0.0, 1.0], [0.3, -0.2, 0.9]])), "image")
scores = score_matrix([image, other_image], [caption], AttentionConfig(direction="both"))
print("scores (images x captions):")
print(np.round(scores.data, 4))
