# %% [markdown]
# Desk-scale run: train a small CNN on the synthetic grating dataset, learn a
# universal perturbation, refine it with the attention image, and compare
# against random sign noise. Takes a couple of minutes on one CPU core.

# %%
import torch

from uapkit import (attack_success_rate, clean_accuracy, effective_pm, random_noise_baseline,
                    save_attention_png, selectivity)
from uapkit.desk import DeskScenario

torch.set_num_threads(1)
desk = DeskScenario()
target = desk.model("cnn_a")
val = desk.attack_data.validation
print("clean accuracy:", clean_accuracy(target, val))

# %%
run = desk.run("cnn_a")
for rec in run.log.records[::10]:
    print(f"epoch {rec.epoch:2d}  loss {rec.mean_loss:.3f}  train ASR {rec.train_asr:.3f}")

# %%
noise = random_noise_baseline(target, val, 10.0, range(5))
for name, p in (("mid", run.mid), ("fin", run.fin)):
    print(f"{name}: ASR {attack_success_rate(target, val, p):.3f}  PM {effective_pm(val, p):.1f}")
print(f"sign noise: ASR {noise:.3f}")

# %%
# where the classifier looks, summed over the attack training images
save_attention_png("attention.png", run.attention)
dist = selectivity(target, val, run.fin)
for row in sorted(dist.rows(), key=lambda r: -r["fraction"])[:3]:
    print(row)
