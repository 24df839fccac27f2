"""Named synthetic scenarios used by the acceptance checks and example configs.

``clean``: observations drawn with exactly the a-priori noise model
(range 2.5 m, phase 0.025 m) and no contamination.

``contaminated``: low-grade tracking-loop thermal noise (DLL and PLL jitter
at 45 dB-Hz, well below the a-priori sigmas) with 20% of pseudoranges
biased by +10 m.

Both use 100 one-second epochs and 12 satellites.
"""

from __future__ import annotations

from ..gnss_sim import ConstellationConfig, ContaminationConfig, Scenario, ScenarioConfig, generate_scenario

N_EPOCHS = 100
N_SATELLITES = 12


def clean_config(seed: int, n_epochs: int = N_EPOCHS) -> ScenarioConfig:
    return ScenarioConfig(duration_s=n_epochs - 1, rng_seed=seed,
                          constellation=ConstellationConfig(n_satellites=N_SATELLITES))


def contaminated_config(seed: int, n_epochs: int = N_EPOCHS, probability: float = 0.2) -> ScenarioConfig:
    # zero floors leave the tracking-loop jitter as the generating noise
    return ScenarioConfig(duration_s=n_epochs - 1, rng_seed=seed, sigma_range=0.0, sigma_phase=0.0,
                          contamination=ContaminationConfig(probability=probability),
                          constellation=ConstellationConfig(n_satellites=N_SATELLITES))


def clean_scenario(seed: int, n_epochs: int = N_EPOCHS) -> Scenario:
    return generate_scenario(clean_config(seed, n_epochs))


def contaminated_scenario(seed: int, n_epochs: int = N_EPOCHS) -> Scenario:
    return generate_scenario(contaminated_config(seed, n_epochs))
