#!/usr/bin/env python3
"""Rebuild the CSV files under data/ from public pip distributions.

  nsw_dw.csv           Dehejia-Wahba NSW experimental sample (causaldata: nsw_mixtape)
  nsw_psid.csv         NSW treated + PSID-1 controls (wooldridge: jtrain3), earnings in dollars
  ihdp_covariates.csv  IHDP covariates with treatment and mother's race (econml: data/ihdp/sim.csv)

Usage: tools/prepare_data.py [--out data]
"""
import argparse
import bz2
import glob
import io
import os
import subprocess
import tarfile
import tempfile
import zipfile

import pandas as pd


def fetch(pkg, dest):
    subprocess.run(["pip", "download", pkg, "--no-deps", "-q", "-d", dest], check=True)
    hits = glob.glob(os.path.join(dest, pkg.replace("-", "_") + "*")) + glob.glob(
        os.path.join(dest, pkg + "*"))
    return sorted(set(hits))[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        sdist = fetch("causaldata", tmp)
        with tarfile.open(sdist) as tf:
            member = next(m for m in tf.getmembers() if m.name.endswith("nsw_mixtape.dta"))
            nsw = pd.read_stata(io.BytesIO(tf.extractfile(member).read()))
        nsw = nsw.drop(columns=["data_id"])
        nsw["treat"] = nsw["treat"].astype(int)
        for c in ["re74", "re75", "re78"]:
            nsw[c] = nsw[c].astype(float).round(3)
        nsw.to_csv(os.path.join(args.out, "nsw_dw.csv"), index=False)

        whl = fetch("wooldridge", tmp)
        with zipfile.ZipFile(whl) as z:
            raw = bz2.decompress(z.read("wooldridge/datasets/jtrain3.csv.bz2"))
        psid = pd.read_csv(io.BytesIO(raw))
        psid = psid[["train", "age", "educ", "black", "hisp", "married",
                     "re74", "re75", "unem74", "unem75", "re78"]].rename(columns={"train": "treat"})
        psid["nodegree"] = (psid["educ"] < 12).astype(int)
        psid["agesq"] = psid["age"] ** 2
        for c in ["re74", "re75", "re78"]:
            psid[c] = (psid[c] * 1000.0).round(3)
        psid.to_csv(os.path.join(args.out, "nsw_psid.csv"), index=False)

        whl = fetch("econml", tmp)
        with zipfile.ZipFile(whl) as z:
            ihdp = pd.read_csv(io.BytesIO(z.read("econml/data/ihdp/sim.csv")))
        ihdp.columns = [c.replace(".", "_") for c in ihdp.columns]
        ihdp.to_csv(os.path.join(args.out, "ihdp_covariates.csv"), index=False)


if __name__ == "__main__":
    main()
