"""Compare agents trained with signed and unsigned IoU-difference rewards."""
from _common import parser, run

from ordloc import experiments

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("rewards", lambda cfg: lambda seed: experiments.reward_comparison(cfg, seed), args)
