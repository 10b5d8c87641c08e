"""Train both stages on digit 4 and report OrdAcc, agent CorLoc, ranking CorLoc and Spearman rho."""
from _common import parser, run

from ordloc import experiments

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    run("source-domain", lambda cfg: lambda seed: experiments.source_domain(cfg, seed).metrics, args)
