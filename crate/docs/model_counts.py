"""Hand-derived parameter and FLOP table for the tiny preset at 64x64.

Written from the architecture description, not from the Rust code:

    block(cin, cout)  = conv3x3 -> PReLU -> conv3x3 -> PReLU -> channel attention
    encoder level i   = block, then 2x2 max pool
    bottleneck        = block (+ histogram branch 256 -> 64 -> C_b, ReLU after each, broadcast add)
    decoder level i   = nearest x2, conv3x3 + PReLU to C_i, concat skip, block(2 C_i, C_i)
    head              = conv3x3 to out channels

Counting rules: conv = 2 k^2 Cin Cout H W, FC = 2 in out, every elementwise op
costs 1 per element it produces (pooling: 1 per input element it reads),
concat is free. Run `python3 docs/model_counts.py > docs/model_counts.md`.
"""

DEPTH, BASE, SIZE, HIDDEN, BINS = 2, 8, 64, 64, 256


def ch(level):
    return BASE * 2 ** level


def area(level):
    return (SIZE >> level) ** 2


rows = []


def conv(name, cin, cout, hw):
    rows.append((name, "conv3x3", 3 * 3 * cin * cout + cout, 2 * 9 * cin * cout * hw))


def fc(name, fin, fout):
    rows.append((name, "fc", fin * fout + fout, 2 * fin * fout))


def elem(name, kind, n):
    rows.append((name, kind, 0, n))


def block(name, cin, cout, hw):
    conv(f"{name}.conv1", cin, cout, hw)
    elem(f"{name}.prelu1", "prelu", cout * hw)
    conv(f"{name}.conv2", cout, cout, hw)
    elem(f"{name}.prelu2", "prelu", cout * hw)
    r = max(cout // 4, 1)
    elem(f"{name}.ca.pool", "global_avg_pool", cout * hw)
    fc(f"{name}.ca.fc1", cout, r)
    elem(f"{name}.ca.relu", "relu", r)
    fc(f"{name}.ca.fc2", r, cout)
    elem(f"{name}.ca.sigmoid", "sigmoid", cout)
    elem(f"{name}.ca.scale", "scale", cout * hw)


def unet(p, cin, cout, hist):
    c = cin
    for i in range(DEPTH):
        block(f"{p}.enc{i}", c, ch(i), area(i))
        elem(f"{p}.pool{i}", "max_pool2", ch(i) * area(i))
        c = ch(i)
    block(f"{p}.mid", c, ch(DEPTH), area(DEPTH))
    if hist:
        cb = ch(DEPTH)
        fc(f"{p}.hist.fc1", BINS, HIDDEN)
        elem(f"{p}.hist.relu1", "relu", HIDDEN)
        fc(f"{p}.hist.fc2", HIDDEN, cb)
        elem(f"{p}.hist.relu2", "relu", cb)
        elem(f"{p}.hist.add", "add", cb * area(DEPTH))
    for i in reversed(range(DEPTH)):
        elem(f"{p}.upsample{i}", "upsample2", ch(i + 1) * area(i))
        conv(f"{p}.up{i}", ch(i + 1), ch(i), area(i))
        elem(f"{p}.up{i}.prelu", "prelu", ch(i) * area(i))
        elem(f"{p}.concat{i}", "concat", 0)
        block(f"{p}.dec{i}", 2 * ch(i), ch(i), area(i))
    conv(f"{p}.head", ch(0), cout, area(0))


unet("stage1", 3, 3, False)
elem("stage1.out.pool", "global_avg_pool", 3 * area(0))
elem("stage1.out.softplus", "softplus", 3)
elem("stage1.out.normalize", "l2_normalize", 3)
unet("stage2", 1, 1, True)
elem("stage2.out.softplus", "softplus", area(0))

print("# Tiny preset: parameters and FLOPs at 64x64")
print()
print("Generated by `docs/model_counts.py`. Both stages, depth 2, base 8 channels,")
print("channel attention on, histogram branch on in stage 2.")
print()
print("| layer | kind | params | flops |")
print("|---|---|---:|---:|")
for name, kind, params, flops in rows:
    print(f"| {name} | {kind} | {params} | {flops} |")
print(f"| **total** | | {sum(r[2] for r in rows)} | {sum(r[3] for r in rows)} |")
