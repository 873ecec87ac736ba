"""Layer plan at the reference size and a cost report for the desk-scale model."""

from rdunet.network import NetworkConfig, build_network, count_params_and_flops, export_shape, layer_plan

paper = NetworkConfig.paper()
print(f"{'level':<8}{'ingredient':<18}{'kernel':>7}  size")
for row in layer_plan(paper):
    h, w, c = row.out_shape
    kernel = f"{row.kernel}x{row.kernel}" if row.kernel else "--"
    print(f"{row.level:<8}{row.ingredient:<18}{kernel:>7}  {h}x{w}x{c}")
print("exported mask:", "x".join(map(str, export_shape(paper))))

# the desk model has the same topology at 64x64 with a quarter of the width
desk = build_network(NetworkConfig.desk(), seed=0)
cost = count_params_and_flops(desk)
print()
print(f"{'level':<8}{'params':>10}{'MMAC':>10}")
for level, v in cost["levels"].items():
    print(f"{level:<8}{v['params']:>10}{v['macs'] / 1e6:>10.1f}")
print(f"{'total':<8}{cost['total_params']:>10}{cost['total_macs'] / 1e6:>10.1f}")
