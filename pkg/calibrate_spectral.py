"""Scratch probe: band statistics per family, pairwise 2-sigma separation,
LQ attenuation, degrade idempotence. Not part of the deliverable."""
from dataclasses import replace

import numpy as np

from loravit.data import (FAMILIES, DatasetSpec, ManipulationFamily, Quality,
                          apply_manipulation, degrade_quality, generate_fake, generate_real)

H = 32
# radial bands in cycles/image; Nyquist is 16
BANDS = {"B1": (0.0, 2.4), "B2": (2.4, 3.6), "B3": (3.6, 4.8),
         "B4": (4.8, 9.6), "B5": (9.6, 16.01)}


def band_energies(img2d):
    w = np.hanning(H)
    win = w[:, None] * w[None, :]
    f = np.fft.fft2(img2d * win)
    p = np.abs(f) ** 2
    fy = np.fft.fftfreq(H) * H
    r = np.sqrt(fy[:, None] ** 2 + fy[None, :] ** 2)
    out = {}
    for name, (lo, hi) in BANDS.items():
        mask = (r > max(lo, 1e-9)) & (r <= hi)
        out[name] = p[mask].sum()
    return out


def collect(kind, n=100, quality=Quality.HQ, seed=0):
    spec = DatasetSpec(n_real=0, n_fake_per_family=0, base_seed=seed, quality=quality)
    stats = {b: [] for b in BANDS}
    for i in range(n):
        s = generate_real(spec, i) if kind == "real" else generate_fake(spec, kind, i)
        e = band_energies(s.image.data[0].astype(np.float64))
        for b in BANDS:
            stats[b].append(e[b])
    return {b: (np.mean(v), np.std(v)) for b, v in stats.items()}


def main():
    for seed in (0, 7):
        print(f"=== base_seed {seed} ===")
        groups = {"real": collect("real", seed=seed)}
        for fam in FAMILIES:
            groups[fam.value] = collect(fam, seed=seed)

        print(f"{'group':<9}" + "".join(f"{b:>14}" for b in BANDS))
        for name, st in groups.items():
            print(f"{name:<9}" + "".join(f"{st[b][0]:>9.1f}±{st[b][1]:<5.0f}" for b in BANDS))

        print("pairwise separation (need >2 sigma in some band):")
        names = list(groups)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                best, best_band = 0.0, "-"
                for b in BANDS:
                    m1, s1 = groups[names[i]][b]
                    m2, s2 = groups[names[j]][b]
                    sep = abs(m1 - m2) / max(s1, s2, 1e-9)
                    if sep > best:
                        best, best_band = sep, b
                flag = "OK " if best > 2 else "BAD"
                print(f"  {flag} {names[i]:<8} vs {names[j]:<8}: {best:6.2f} sigma in {best_band}")

    spec = DatasetSpec(n_real=0, n_fake_per_family=0, base_seed=0)

    fracs = []
    for i in range(100):
        img = generate_real(spec, i).image.data[0].astype(np.float64)
        w = np.hanning(H); win = w[:, None] * w[None, :]
        f = np.abs(np.fft.fft2(img * win)) ** 2
        fy = np.fft.fftfreq(H) * H
        r = np.sqrt(fy[:, None] ** 2 + fy[None, :] ** 2)
        nondc = r > 1e-9
        fracs.append(f[nondc & (r <= 2.4)].sum() / f[nondc].sum())
    print(f"\nreal low-band power fraction: min {min(fracs):.4f} mean {np.mean(fracs):.4f}")

    worst, viol = 1e9, 0
    for i in range(50):
        hq = generate_fake(spec, ManipulationFamily.CHECKER, i)
        lq = degrade_quality(hq)
        e_hq = band_energies(hq.image.data[0].astype(np.float64))
        e_lq = band_energies(lq.image.data[0].astype(np.float64))
        hi_hq = e_hq["B4"] + e_hq["B5"]
        hi_lq = e_lq["B4"] + e_lq["B5"]
        if hi_lq >= hi_hq:
            viol += 1
        worst = min(worst, hi_hq / max(hi_lq, 1e-9))
    print(f"checker LQ/HQ high-band: violations {viol}/50, worst ratio {worst:.2f}x")

    ratios = []
    for i in range(50):
        base = generate_real(spec, 1_000_000 * 3 + i)
        fake = apply_manipulation(base, ManipulationFamily.CHECKER)
        eb = band_energies(base.image.data[0].astype(np.float64))
        ef = band_energies(fake.image.data[0].astype(np.float64))
        ratios.append((ef["B4"] + ef["B5"]) / max(eb["B4"] + eb["B5"], 1e-9))
    print(f"checker vs source high-band ratio: mean {np.mean(ratios):.1f} min {min(ratios):.1f}")

    level = 1.0 / 31.0
    worst_diff, count2 = 0.0, 0
    for seed in range(4):
        sp = replace(spec, base_seed=seed)
        for fam in FAMILIES:
            for i in range(50):
                s = generate_fake(sp, fam, i)
                d1 = degrade_quality(s)
                d2 = degrade_quality(replace(d1, quality=Quality.HQ))
                diff = np.max(np.abs(d2.image.data - d1.image.data)) / level
                worst_diff = max(worst_diff, diff)
                if diff > 1.01:
                    count2 += 1
    print(f"degrade idempotence: worst {worst_diff:.2f} levels, >1-level samples {count2}/800")


if __name__ == "__main__":
    main()
