"""Independent spectral oracle for dataset tests: Hann-windowed 2-D FFT
band energies over radial frequency (cycles/image)."""

import numpy as np

# radial band edges in cycles/image; Nyquist for a 32-px image is 16
BANDS = {"low": (0.0, 2.4), "blend": (2.4, 3.6), "texture": (3.6, 4.8),
         "warp": (4.8, 9.6), "checker": (9.6, 16.01)}


def _radial_grid(h):
    f = np.fft.fftfreq(h) * h
    return np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)


def power_spectrum(img2d):
    h = img2d.shape[0]
    w = np.hanning(h)
    return np.abs(np.fft.fft2(img2d * (w[:, None] * w[None, :]))) ** 2


def band_energies(img2d):
    p = power_spectrum(img2d)
    r = _radial_grid(img2d.shape[0])
    return {name: p[(r > max(lo, 1e-9)) & (r <= hi)].sum()
            for name, (lo, hi) in BANDS.items()}


def low_band_fraction(img2d, cutoff):
    """Fraction of non-DC power at radial frequency <= cutoff."""
    p = power_spectrum(img2d)
    r = _radial_grid(img2d.shape[0])
    nondc = r > 1e-9
    return p[nondc & (r <= cutoff)].sum() / p[nondc].sum()


def high_band_energy(img2d, cutoff=9.6):
    p = power_spectrum(img2d)
    r = _radial_grid(img2d.shape[0])
    return p[r > cutoff].sum()


def spectral_centroid(img2d):
    img = img2d - img2d.mean()
    p = power_spectrum(img)
    r = _radial_grid(img2d.shape[0])
    nondc = r > 1e-9
    return (p[nondc] * r[nondc]).sum() / p[nondc].sum()
