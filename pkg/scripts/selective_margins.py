"""Two-digit images: CorLoc of the queried digit as the class-separation margin grows."""
from _common import parser, run

from ordloc import experiments


def pipeline(cfg):
    def one(seed):
        return {f"corloc_m{int(m)}": experiments.selective(cfg, m, seed)["corloc"] for m in cfg.eval.selective_margins}

    return one


if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("selective", pipeline, args)
