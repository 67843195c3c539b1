"""modelhome: a runtime-model framework for smart-home systems.

Two live models are kept in sync: a device runtime model (one element per
physical/simulated device) and a developer-defined scenario model. Declarative
mapping rules with an embedded expression language drive the synchronization in
both directions; scenario behavior (threshold rules, state machines) runs
against the scenario model only and never talks to devices directly.
"""

__version__ = "0.1.0"
