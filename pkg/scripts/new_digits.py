"""Transfer a digit-4 agent to the other nine digits: direct, adapted and fine-tuned CorLoc."""
from _common import parser, run

from ordloc import experiments

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("new-digits", lambda cfg: lambda seed: experiments.new_digits(cfg, seed), args)
