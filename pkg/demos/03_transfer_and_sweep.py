# %% [markdown]
# Cross-model transfer between the three desk CNNs, then a norm sweep on one
# of them. Trains three classifiers and three perturbations (about 6 minutes).

# %%
import numpy as np
import torch

from uapkit import clean_accuracy, effective_pm, norm_sweep, transfer_matrix
from uapkit.desk import DeskScenario

torch.set_num_threads(1)
desk = DeskScenario()
ids = ("cnn_a", "cnn_b", "cnn_wide")
val = desk.attack_data.validation
targets = [desk.model(m) for m in ids]

# %%
tm = transfer_matrix({m: desk.run(m).fin for m in ids}, targets, val)
print("rows: source, columns: target")
print(np.round(tm.values, 3))
print("misclassification floor:", [round(1 - clean_accuracy(t, val), 3) for t in targets])

# %%
p = desk.run("cnn_a").fin
pm = effective_pm(val, p)
for nu, asr in norm_sweep(targets[0], val, p, np.linspace(0, 2 * pm, 9)[1:]):
    print(f"PM {nu:7.1f}  ASR {asr:.3f}")
