"""Print FLOP overheads for the /16 and /14 ViT-B shapes side by side."""

from vitlab.harness.train import bench_rows

a = {name: (tot, over) for name, tot, over in bench_rows("vitb16")}
b = {name: (tot, over) for name, tot, over in bench_rows("vitb14")}
print(f"{'variant':24s} {'B/16 (N=196)':>14s} {'B/14 (N=256)':>14s}")
for name in a:
    print(f"{name:24s} {100 * a[name][1]:13.3f}% {100 * b[name][1]:13.3f}%")
