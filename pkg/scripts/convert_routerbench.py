"""One-shot conversion of the wide benchmark table to the ucbroute dataset format.

The input is the published pickle (or a CSV export) with one row per query:
a prompt column, a domain column, and for every model ``<model>`` a quality
column plus a ``<model>|total_cost`` column. Embeddings are precomputed
elsewhere and passed as an ``.npy`` array aligned with the rows, or computed
here with ``--encoder`` (needs sentence-transformers).

Auxiliary features mirror the synthetic generator: prompt length / 100,
log prompt length, and relative domain frequency times D.

    python scripts/convert_routerbench.py routerbench_0shot.pkl bench.txt \
        --encoder sentence-transformers/all-MiniLM-L6-v2

Requires pandas (not a dependency of the library).
"""
import argparse
import sys

import numpy as np
import pandas as pd

from ucbroute.data import Dataset, Header, write_dataset

COST_SUFFIX = "|total_cost"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("table", help=".pkl or .csv wide table")
    ap.add_argument("out", help="output dataset text file")
    ap.add_argument("--embeddings", help=".npy (n, E) aligned with table rows")
    ap.add_argument("--encoder", help="sentence-transformers model name to embed prompts")
    ap.add_argument("--prompt-col", default="prompt")
    ap.add_argument("--domain-col", default="eval_name")
    ap.add_argument("--id-col", default="sample_id")
    args = ap.parse_args(argv)

    df = pd.read_pickle(args.table) if args.table.endswith(".pkl") else pd.read_csv(args.table)
    models = [c[: -len(COST_SUFFIX)] for c in df.columns if c.endswith(COST_SUFFIX)]
    if not models:
        sys.exit(f"no '<model>{COST_SUFFIX}' columns found")
    quality = df[models].to_numpy(dtype=np.float64)
    cost = df[[m + COST_SUFFIX for m in models]].to_numpy(dtype=np.float64)
    keep = np.isfinite(quality).all(1) & np.isfinite(cost).all(1)
    print(f"{len(df)} rows, {len(models)} models, dropping {(~keep).sum()} rows with missing outcomes")

    prompts = df[args.prompt_col].astype(str).to_numpy()
    if args.embeddings:
        emb = np.load(args.embeddings).astype(np.float64)
        if len(emb) != len(df):
            sys.exit(f"embeddings have {len(emb)} rows, table has {len(df)}")
    elif args.encoder:
        from sentence_transformers import SentenceTransformer

        emb = SentenceTransformer(args.encoder).encode(list(prompts), show_progress_bar=True)
        emb = np.asarray(emb, dtype=np.float64)
    else:
        sys.exit("give --embeddings or --encoder")

    df, prompts, emb = df[keep], prompts[keep], emb[keep]
    quality, cost = np.clip(quality[keep], 0.0, 1.0), np.maximum(cost[keep], 0.0)
    domains, dom_ids = np.unique(df[args.domain_col].astype(str).to_numpy(), return_inverse=True)
    D = len(domains)
    length = np.array([max(len(p), 1) for p in prompts], dtype=np.float64)
    freq = np.bincount(dom_ids, minlength=D) / len(dom_ids)
    features = np.column_stack([length / 100.0, np.log(length), freq[dom_ids] * D])
    ids = df[args.id_col].astype(str).str.replace(r"\s+", "_", regex=True).tolist() \
        if args.id_col in df else [f"q{i:06d}" for i in range(len(df))]

    header = Header(len(models), D, emb.shape[1], float(cost.max()), tuple(m.replace(",", "_") for m in models))
    ds = Dataset(header, ids, dom_ids.astype(np.int64), emb, features, quality, cost)
    ds.validate()
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples, K={header.K}, D={D}, E={header.E} to {args.out}")


if __name__ == "__main__":
    main()
