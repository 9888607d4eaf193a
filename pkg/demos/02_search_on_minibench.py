# coding: utf-8

# # Search on a brute-forced mini-benchmark
#
# The cell space here is kept small (2 intermediate nodes, 27 architectures)
# so the whole script finishes in about a minute. The acceptance suite
# does the same thing on the 729-architecture default.

# In[1]:

import numpy as np

from distnas.bench import OracleConfig, build_oracle, oracle_rank, regret, spearman
from distnas.data import gen_dataset
from distnas.proxies import NetTemplate, synflow_score
from distnas.search import SearchConfig, run_balenas, run_darts_baseline, select_final
from distnas.space import enumerate_all, format_arch

ds = gen_dataset("moons", 2000, 0.15, seed=0)
base = dict(num_intermediate_nodes=2)
space = SearchConfig(**base).space
print(space.num_archs, "architectures,", space.num_edges, "edges, ops", space.ops)


# ## Ground truth
#
# Train every architecture on its own (three inits each) and keep the
# average validation accuracy.

# In[2]:

bench = build_oracle(space, ds, OracleConfig())
accs = np.array(sorted((r[0] for r in bench.rows.values()), reverse=True))
print("best", accs[0], " median", np.median(accs), " worst", accs[-1])


# ## Distribution search vs the deterministic baseline

# In[3]:

print("seed  balenas            darts")
for seed in range(3):
    cfg = SearchConfig(seed=seed, **base)
    dist, arch, trace = run_balenas(cfg, ds, record_wall_time=False)
    _, d_arch, _ = run_darts_baseline(cfg, ds)
    print(f"{seed:>4}  {format_arch(arch)} r{oracle_rank(bench, arch):<3}  "
          f"{format_arch(d_arch)} r{oracle_rank(bench, d_arch)}")


# The learned sd of the last run, per edge and op; larger values mean the
# search is still undecided there.

# In[4]:

print(np.round(dist.sigma, 3))


# ## Picking with a zero-cost proxy
#
# Instead of the argmax of the mean, draw K logits from the distribution and
# keep the sampled architecture with the best Synflow score.

# In[5]:

tf = select_final(dist, cfg, ds, selection="proxy", metric="synflow", K=50)
print("argmax", format_arch(arch), "regret", round(regret(bench, arch), 4))
print("synflow", format_arch(tf), "regret", round(regret(bench, tf), 4))

net = NetTemplate(space, ds.input_dim, 16, ds.num_classes).build(0)
rho = spearman(bench, {a: synflow_score(a, net, 0) for a in enumerate_all(space)})
print("Spearman(synflow, accuracy) =", round(rho, 3))
