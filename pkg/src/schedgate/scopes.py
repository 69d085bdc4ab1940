"""Known authorization scopes and what each one grants."""

SCOPE_CATALOG: dict[str, str] = {
    "slurm:read": "read data from the Slurm controller",
    "slurm:jobs:manage": "submit, update, or cancel jobs",
    "slurm:nodes:manage": "add, update, or remove nodes",
    "slurm:reservations:manage": "create, update, or delete resource reservations",
    "slurm:reconfigure": "ask the controller to reconfigure",
    "slurmdb:read": "read data from the Slurm database",
    "slurmdb:accounts:manage": "create, update, or delete accounts",
    "slurmdb:accounts_association:manage": "create, update, or delete accounts associations",
    "slurmdb:associations:manage": "create, update, or delete associations",
    "slurmdb:clusters:manage": "create, update, or delete clusters",
    "slurmdb:config:read": "read the database configuration",
    "slurmdb:config:manage": "update the database configuration",
    "slurmdb:qos:manage": "create, update, or delete quality of service instances",
    "slurmdb:users:manage": "create, update, or delete users",
    "slurmdb:users_association:manage": "create, update, or delete users associations",
    "slurmdb:tres:manage": "create, update, or delete trackable resources",
    "slurmdb:wckeys:manage": "create, update, or delete work characterization keys",
    "pact:self": "run PACT assessments against your own account",
    "pact:admin": "run PACT assessments against any user account",
    "health:check": "check the health of gateway components",
    "pprof:read": "read runtime profiling data",
}

KNOWN_SCOPES = frozenset(SCOPE_CATALOG)

# Granted to cluster users authenticated by a MUNGE credential.
DEFAULT_MUNGE_SCOPES = frozenset(
    {"slurm:read", "slurmdb:read", "slurm:jobs:manage", "pact:self", "health:check"}
)


def unknown_scopes(scopes) -> list[str]:
    return sorted(s for s in scopes if s not in KNOWN_SCOPES)
