"""
Cross-backbone transfer and feature separability.

Adversarial images crafted through one toy backbone are scored by detectors
built on each of the others. The second half measures how much the first
trainable layer separates real from fake compared with raw backbone features.

    python3 demos/transfer_and_embeddings.py
"""

import numpy as np

from siaa.attacks import AttackConfig, attack_set, run_siaa
from siaa.data import ImageSet
from siaa.evaluation import export_embeddings, fisher_ratio, transfer_matrix, transfer_table
from siaa.toy import build_toy_pipeline

pipelines = {f"toy-{s}": build_toy_pipeline(seed=0, backbone_seed=s, n_test=40) for s in (0, 1)}
clean = pipelines["toy-0"].test

adversarial, detectors = {}, {}
for name, p in pipelines.items():
    fn = lambda img, y, c, p=p: run_siaa(img, y, p.backbone, p.text_encoder, p.fphead, c)  # noqa: E731
    results = attack_set(clean.images, clean.labels, clean.ids, fn, AttackConfig())
    adversarial[name] = ImageSet(np.stack([r.adversarial_image for r in results]), clean.labels, clean.ids)
    detectors[name] = p.detector

print("source -> target      ASR    post-AUC")
for row in transfer_table(transfer_matrix(adversarial, detectors, clean)):
    print(f"{row['source']:6s} -> {row['target']:6s}    {row['asr']:.3f}  {row['post_auc']:.3f}")

p = pipelines["toy-0"]
for layer_name, layer in (("surrogate head", p.fphead), ("detector", p.detector)):
    rows = export_embeddings(p.backbone, layer, clean)
    for stage in ("backbone", "layer1"):
        vecs = np.stack([r[3] for r in rows if r[2] == stage])
        labels = [r[1] for r in rows if r[2] == stage]
        print(f"{layer_name:15s} {stage:8s} Fisher ratio {fisher_ratio(vecs, labels):8.2f}")
