"""Near-optimal long-run average harvesting for a predator-prey system under wideband noise."""
