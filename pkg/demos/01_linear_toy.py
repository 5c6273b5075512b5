# %% [markdown]
# A two-class linear classifier on 2-pixel "images". For a linear model the
# best l-inf perturbation against class 0 is eps * sign(w1 - w0), so we can
# check what the generator learns against a closed form.

# %%
import numpy as np
import torch

from uapkit import (GeneratorConfig, LabeledDataset, ModelSpec, Split, TrainConfig, ImageBatch,
                    attack_success_rate, build_generator, train_classifier, train_uap)

torch.set_num_threads(1)
rng = np.random.default_rng(0)

# %%
# two blobs, one per class, well inside the pixel range
def blobs(n):
    x0 = rng.normal((90, 150), 6, (n, 2))
    x1 = rng.normal((150, 90), 6, (n, 2))
    x = np.concatenate([x0, x1]).reshape(-1, 1, 1, 2)
    y = np.repeat([0, 1], n)
    return Split(ImageBatch(torch.tensor(x)), torch.tensor(y))

data = LabeledDataset(blobs(40), blobs(40), ["a", "b"])
spec = ModelSpec("toy", "toy_linear", 2, (1, 1, 2), epochs=300, learning_rate=0.5, batch_size=8)
target = train_classifier(spec, data, seed=0)
print("clean accuracy:", (target.predict_labels(data.validation.images.data) == data.validation.labels).float().mean().item())

# %%
# the closed-form direction
W = target.module.fc.weight.detach().double().numpy() * target.input_scale
best = np.sign(W[1] - W[0])

# %%
# attack only class 0: one universal shift cannot push both blobs across
class0 = data.train.subset(torch.nonzero(data.train.labels == 0)[:, 0])
eps = 40.0
gen = build_generator(GeneratorConfig((1, 1, 2), eps, depth=0, base_channels=4)).double()
cfg = TrainConfig(epsilon=eps, optimizer="adam", learning_rate=0.05, batch_size=8, epochs=50)
delta, log = train_uap(gen, target, class0, cfg)

d = delta.delta.reshape(-1).double().numpy()
angle = np.degrees(np.arccos(d @ best / np.linalg.norm(d) / np.linalg.norm(best)))
print("learned delta:", d, "optimum:", eps * best)
print(f"angle {angle:.2f} deg, final epoch ASR {log.records[-1].train_asr:.3f}")
print("validation class-0 ASR:",
      attack_success_rate(target, data.validation.subset(torch.nonzero(data.validation.labels == 0)[:, 0]), delta))
