# %% [markdown]
# # Synthetic grids, augmentation and the dataset layout
#
# Each location is a generator family. A dataset holds the same number of
# n-1 and not n-1 grids per location, plus one augmented child per grid
# whose label the oracle re-checks.

# %%
import tempfile
from pathlib import Path

from n1gin.grid import route_length_stats
from n1gin.synth import GeneratorConfig, augment, build_dataset, generate_grid

cfg = GeneratorConfig(location="demo", n_samples=6, node_count_range=(14, 18), sources_range=(1, 1))
sample = generate_grid(cfg, seed=3, target_label=1)
print(sample.grid.n_nodes, "nodes,", sample.grid.n_edges, "cables, label", sample.label)
print("routes:", route_length_stats([sample.grid]))

# %%
child, record = augment(sample, seed=5)
print(record.action.value, "touching nodes", record.affected, "label kept:", record.label_verified)
print("child:", child.grid.n_nodes, "nodes, label", child.label)

# %% [markdown]
# Two locations of six grids each. The summary mirrors a dataset table:
# mean and spread of sizes, counts and the n-1 share.

# %%
out = Path(tempfile.mkdtemp()) / "data"
locations = [cfg, GeneratorConfig(location="bigger", n_samples=6, node_count_range=(24, 30))]
manifest, samples = build_dataset(locations, out, seed=7)
print(manifest.summary_table())
print(sorted(p.name for p in out.iterdir()))
print({split: sum(e.split == split for e in manifest.entries) for split in ("train", "val", "test", "excluded")})
