"""
Gray-box attack on a toy detector: the attacker knows the frozen backbone but
never touches the detector head. Compares the surrogate attack against
feature-space baselines and the white-box upper bound.

    python3 demos/gray_box_attack.py
"""

import numpy as np

from siaa.attacks import (AttackConfig, attack_set, quantize_adversarial, run_pgd_l, run_pgd_vit,
                          run_pgd_whitebox, run_siaa)
from siaa.data import ImageSet
from siaa.evaluation import evaluate_attack
from siaa.toy import build_toy_pipeline

toy = build_toy_pipeline(seed=0)
test = toy.test.subset(np.r_[0:40, 100:140])
config = AttackConfig()  # eps 8/255, step 2/255, 14 iterations

attacks = {
    "pgd (white-box)": lambda img, y, c: run_pgd_whitebox(img, y, toy.detector, c),
    "siaa": lambda img, y, c: run_siaa(img, y, toy.backbone, toy.text_encoder, toy.fphead, c),
    "pgd-l": lambda img, y, c: run_pgd_l(img, toy.backbone, toy.fphead, c),
    "pgd-vit": lambda img, y, c: run_pgd_vit(img, toy.backbone, c),
}

print(f"{'attack':16s}  ASR    AUC before/after  SSIM   WPSNR")
for name, fn in attacks.items():
    results = attack_set(test.images, test.labels, test.ids, fn, config)
    # what would be written to disk: 8-bit PNGs
    adv = ImageSet(np.stack([quantize_adversarial(r.adversarial_image)[1] for r in results]), test.labels, test.ids)
    rep = evaluate_attack(toy.detector, test, adv, name, "toy")
    print(f"{name:16s}  {rep.asr:.3f}  {rep.pre_auc:.3f} / {rep.post_auc:.3f}     {rep.mean_ssim:.3f}  {rep.mean_wpsnr:.2f}")

res = run_siaa(test.images[0], int(test.labels[0]), toy.backbone, toy.text_encoder, toy.fphead, config)
print("objective per step on the first image:", " ".join(f"{x:+.3f}" for x in res.objective_trace))
