"""
Settings accessor for the policy modules.

Reads the POLICYLAB dict from Django settings when they are configured and
falls back to the built-in defaults otherwise, so the algorithms can be
imported without a Django project around them.
"""
import os

from django.conf import settings

DEFAULTS = {
    'OUTPUT_ROOT': 'runs',
    'WORKERS': 1,
    'ENUMERATION_WORKERS': os.cpu_count() or 1,
    'PARALLEL_MIN_FRONTIER': 4096,
    'ENUMERATION_BATCH': 65536,
    'LP_BOX_BOUND': 1e3,
    'LP_FEASIBILITY_EPS': 1e-7,
    'LP_PIVOT_TOL': 1e-10,
    'LP_MAX_ITER': 5000,
    'FRONTIER_SPILL_THRESHOLD': 10**6,
    'PLUGIN_M_INFLATION': 1.5,
    'POPULATION_MC_DRAWS': 10**6,
    'ORACLE_POOL': 100,
}


def get_setting(name):
    """Return a POLICYLAB setting, or its default when Django is not configured."""
    if name not in DEFAULTS:
        raise KeyError(f"Unknown POLICYLAB setting: {name}")
    if settings.configured:
        return getattr(settings, 'POLICYLAB', {}).get(name, DEFAULTS[name])
    return DEFAULTS[name]
