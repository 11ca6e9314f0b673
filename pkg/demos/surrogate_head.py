"""
Train the surrogate feature-processing head on toy data and watch the
image embeddings cluster around their class prompts.

    python3 demos/surrogate_head.py
"""

import torch

from siaa.backbones import encode_text, make_toy_backbone, ToyTextEncoder
from siaa.fphead import PROMPTS, Phase1Config, fp_forward_text, fp_forward_vision, l2_normalize, train_fp_head
from siaa.toy import toy_datasets

backbone = make_toy_backbone(0)
text_encoder = ToyTextEncoder(32)
train, val, _ = toy_datasets(seed=0)

head, trace = train_fp_head(train, backbone, text_encoder, Phase1Config(epochs=20, embed_dim=64), val=val)

print("epoch  beta   pull    push    text    val-acc")
for r in trace.epochs:
    print(f"{r.epoch:5d}  {r.beta:.2f}  {r.pull:.4f}  {r.push:.4f}  {r.text:.4f}  {r.val_metric:.3f}")
print("kept epoch", trace.best_epoch)

with torch.no_grad():
    t = l2_normalize(fp_forward_text(head, encode_text(text_encoder, PROMPTS)))
    v = l2_normalize(fp_forward_vision(head, backbone(val.images)))
    d = torch.cdist(v, t)
for label, name in enumerate(("real", "fake")):
    rows = d[torch.as_tensor(val.labels) == label]
    print(f"{name} images: mean distance to 'real' prompt {rows[:, 0].mean():.3f}, "
          f"to 'fake' prompt {rows[:, 1].mean():.3f}")
print(f"prompt separation {torch.dist(t[0], t[1]):.3f}")
