"""Train on random-patch digit 3 and adapt to digit 2 on clutter, impulse and Gaussian backgrounds."""
from _common import parser, run

from ordloc import experiments

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("backgrounds", lambda cfg: lambda seed: experiments.backgrounds(cfg, seed), args)
