# %% [markdown]
# # Training a GIN and asking which features it uses
#
# A small run on a small dataset, so it finishes in about a minute. The
# acceptance suite repeats this at scale (2000 generated grids).

# %%
import numpy as np

from n1gin.evaluation import compare_baseline, pfi_report
from n1gin.gin import GinConfig, GinModel, train
from n1gin.grid import Provenance, route_length_stats
from n1gin.metrics import accuracy, auc
from n1gin.synth import GeneratorConfig, build_dataset

locations = [GeneratorConfig(location=f"site{i}", n_samples=40, node_count_range=(16 + 6 * i, 22 + 6 * i))
             for i in range(2)]
manifest, samples = build_dataset(locations, seed=1)
by_id = {s.sample_id: s for s in samples}


def pick(split, generated_only=False):
    return [by_id[e.id] for e in manifest.entries
            if e.split == split and (not generated_only or e.provenance is Provenance.GENERATED)]


train_set, val_set, test_set = pick("train"), pick("val", True), pick("test", True)
stats = route_length_stats([s.grid for s in test_set])
k = int(np.floor(stats.avg + 0.5))  # depth follows the mean route length
print(len(train_set), "training graphs, K =", k)

# %%
cfg = GinConfig(k=k, lr=3e-3, epochs=15, seed=0)
result = train(GinModel(cfg), train_set, val_set, cfg)
p = result.model.predict(test_set)
y = [s.label for s in test_set]
print(f"best epoch {result.best_epoch}, test auc {auc(p, y):.3f}, accuracy {accuracy(p, y):.3f}")

# %% [markdown]
# Permutation importance: shuffle one feature column across the pooled test
# graphs and measure the AUC drop. Normalised values are min-max scaled to [0, 1].

# %%
rep = pfi_report(result.model, test_set, repeats=3, seed=0)
for row in rep.rows():
    print(f"{row['kind']:>4} {row['feature']:<20} {row['normalized']:.2f}")

# %%
print(compare_baseline(test_set, result.model).table())
