"""Scene maps as pose-regression convnets: training, evaluation and compression studies."""
