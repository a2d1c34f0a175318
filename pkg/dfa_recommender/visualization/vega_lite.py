import logging
from typing import Any, Dict, Optional

import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA = "https://vega.github.io/schema/vega-lite/v5.json"


class ChartSpecBuilder:
    """
    Generates Vega-Lite specifications for the experiment plot data.
    """

    CHART_TYPES = ("tradeoff", "shard_accuracy", "k_trace")

    def create_chart(
        self,
        chart_type: str,
        data: pd.DataFrame,
        options: Optional[Dict[str, Any]] = None
    ) -> Dict[str, Any]:
        """
        Create a Vega-Lite specification for the requested chart type.

        Args:
            chart_type: One of tradeoff, shard_accuracy, k_trace
            data: Plot data; the CSV emitted next to the chart
            options: Optional width, height and title

        Returns:
            Vega-Lite specification as a dictionary
        """
        options = options or {}
        records = data.astype(object).where(data.notna(), None).to_dict(orient="records")

        spec = {
            "$schema": SCHEMA,
            "data": {"values": records},
            "width": options.get('width', 600),
            "height": options.get('height', 400),
            "config": {
                "background": options.get('background', "white"),
            },
        }

        kind = chart_type.lower()
        if kind == 'tradeoff':
            spec.update(self._create_tradeoff_chart(options))
        elif kind == 'shard_accuracy':
            spec.update(self._create_shard_accuracy_chart(options))
        elif kind == 'k_trace':
            spec.update(self._create_k_trace_chart(options))
        else:
            raise ValueError(f"Unsupported chart type: {chart_type}")

        logger.debug(f"Built {kind} chart over {len(records)} rows")
        return spec

    def _create_tradeoff_chart(self, options: Dict[str, Any]) -> Dict[str, Any]:
        # Cost and standard error sit on independent y scales.
        x = {"field": "S", "type": "quantitative", "title": "number of shards"}
        return {
            "title": options.get('title', "Cost per iteration and standard error of theta vs shards"),
            "layer": [
                {
                    "mark": {"type": "line", "point": True, "color": "steelblue"},
                    "encoding": {
                        "x": x,
                        "y": {"field": "per_shard_cost", "type": "quantitative", "scale": {"type": "log"},
                              "title": "relative cost per iteration"},
                    },
                },
                {
                    "mark": {"type": "line", "point": True, "color": "darkorange"},
                    "encoding": {
                        "x": x,
                        "y": {"field": "se_theta", "type": "quantitative", "title": "relative SE of theta"},
                    },
                },
            ],
            "resolve": {"scale": {"y": "independent"}},
        }

    def _create_shard_accuracy_chart(self, options: Dict[str, Any]) -> Dict[str, Any]:
        color = {"field": "metric", "type": "nominal"}
        x = {"field": "shard", "type": "ordinal", "title": "shard"}
        return {
            "title": options.get('title', "Per-shard accuracy with 95% intervals"),
            "layer": [
                {
                    "mark": {"type": "point", "filled": True},
                    "encoding": {
                        "x": x,
                        "y": {"field": "value", "type": "quantitative", "scale": {"zero": False},
                              "title": "accuracy"},
                        "color": color,
                        "xOffset": color,
                    },
                },
                {
                    "mark": "rule",
                    "encoding": {
                        "x": x,
                        "y": {"field": "ci_lo", "type": "quantitative"},
                        "y2": {"field": "ci_hi"},
                        "color": color,
                        "xOffset": color,
                    },
                },
            ],
        }

    def _create_k_trace_chart(self, options: Dict[str, Any]) -> Dict[str, Any]:
        return {
            "title": options.get('title', "Number of features across stored draws"),
            "mark": {"type": "line", "interpolate": "step-after"},
            "encoding": {
                "x": {"field": "iteration", "type": "quantitative"},
                "y": {"field": "K", "type": "quantitative", "title": "K"},
            },
        }
