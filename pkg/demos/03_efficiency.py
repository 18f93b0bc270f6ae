"""Where the savings come from: encoder calls, FLOPs and wall-clock.

Full-grid inference encodes every highest-magnification patch. Zooming
encodes all low-magnification patches, then only the children of the K most
attended parents at each step.
"""

from zoommil import SynthConfig, ZoomModel, generate_dataset
from zoommil.bench import count_flops, format_delimited, measure_throughput

ds = generate_dataset(SynthConfig(n_train=1, n_val=1, n_test=48, seed=2))
sizes = ds.cfg.sizes
E = ds.encoder.flops_per_patch
print(f"pyramid sizes {sizes}, encoder cost {E} FLOPs per patch")

rows = []
full = count_flops(ZoomModel.create(64, 3, (4, 4)), sizes, "full_grid", E)
for K in (1, 2, 4, 8, 12, 16):
    m = ZoomModel.create(64, 3, (K, K))
    z = count_flops(m, sizes, "zoom", E)
    rows.append({"K": K, "encoder_calls": z.total_encoder_calls, "encoder_flops": z.encoder_flops,
                 "head_flops": z.head_flops, "fraction_of_full_grid": round(z.total / full.total, 3)})
print(format_delimited(rows))
print(f"full grid: {full.total_encoder_calls} encoder calls, {full.total} FLOPs")

# measured throughput on raw patches, batched identically for both modes
patches = [ds.patches(i) for i in ds.splits["test"]]
for label, K, mode in (("zoom K=4", 4, "zoom"), ("zoom K=12", 12, "zoom"), ("full grid", 4, "full_grid")):
    rep = measure_throughput(ZoomModel.create(64, 3, (K, K), seed=0), patches, mode, encoder=ds.encoder, batch_size=16)
    print(f"{label:>10}: {rep.images_per_hour:,.0f} images/hour")

# `zoommil bench` pairs these numbers with a trained checkpoint's accuracy and
# writes the Pareto frontier to frontier.tsv
