"""Regenerate the CSV tables under src/spectrascan/data.

Needs ``colour-science`` (dev only; the package reads the CSVs directly).
"""

from pathlib import Path

import colour
import colour.characterisation as cc
import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "spectrascan" / "data"
WL = np.arange(380, 781, 5, dtype=float)


def _write(path, header, columns):
    table = np.column_stack(columns)
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.8g")


def _sample(sd):
    return np.asarray([float(sd[w]) if sd.domain.min() <= w <= sd.domain.max() else np.nan for w in WL])


def _extrapolated(sd):
    sd = sd.copy()
    sd.extrapolator_kwargs = {"method": "Constant"}
    sd = sd.align(colour.SpectralShape(380, 780, 5))
    return np.asarray(sd.values, dtype=float)


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    cmfs = colour.MSDS_CMFS["CIE 1931 2 Degree Standard Observer"]
    xyz = np.asarray(cmfs[WL])
    _write(OUT / "cie1931_2deg.csv", ["wavelength_nm", "x_bar", "y_bar", "z_bar"], [WL, *xyz.T])

    chart = colour.SDS_COLOURCHECKERS["BabelColor Average"]
    names = list(chart.keys())
    patches = np.array([_extrapolated(chart[n]) for n in names])
    _write(
        OUT / "colorchecker_babelcolor.csv",
        ["wavelength_nm", *[n.replace(",", "").replace(" ", "_") for n in names]],
        [WL, *patches],
    )

    sens = colour.MSDS_CAMERA_SENSITIVITIES["Nikon 5100 (NPL)"]
    sens = sens.copy().align(colour.SpectralShape(380, 780, 5))
    vals = np.clip(np.asarray(sens.values, dtype=float), 0, None)
    vals /= vals.max()
    _write(OUT / "camera_nikon5100.csv", ["wavelength_nm", "r", "g", "b"], [WL, *vals.T])

    # Training reflectances for the PCA basis; drop anything that nearly
    # duplicates a chart patch so the chart stays out-of-sample.
    training = []
    td = cc.read_training_data_rawtoaces_v1()
    td = td.copy().align(colour.SpectralShape(380, 780, 5))
    training.extend(np.asarray(td.values, dtype=float).T)
    for sds in (colour.quality.SDS_TCS, colour.quality.SDS_VS["NIST CQS 9.0"]):
        training.extend(_extrapolated(sd) for sd in sds.values())
    training = np.clip(np.array(training), 0.0, 1.0)
    keep = []
    for curve in training:
        d = np.sqrt(np.mean((patches - curve) ** 2, axis=1))
        if d.min() > 0.01:
            keep.append(curve)
    keep = np.array(keep)
    print(f"training curves kept: {len(keep)} / {len(training)}")
    _write(
        OUT / "reflectance_training.csv",
        ["wavelength_nm", *[f"s{i:03d}" for i in range(len(keep))]],
        [WL, *keep],
    )


if __name__ == "__main__":
    main()
