"""
This module contains the Jinja2 environment used to render the comparison
tables and the SVG plots of the reporting stage.
"""

from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    Text,
    Tuple,
    Union,
)

from jinja2 import (
    ChoiceLoader,
    Environment,
    FileSystemLoader,
    PackageLoader,
    StrictUndefined,
)


PLOT_WIDTH = 480
PLOT_HEIGHT = 320
PLOT_MARGIN = 40


def fixed(value: Optional[float], digits: int = 2) -> str:
    """Format a number with a fixed number of decimals (`-` for missing values)."""
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def signed(value: Optional[float], digits: int = 2) -> str:
    """Like `fixed` but always with a sign."""
    if value is None:
        return "-"
    return f"{value:+.{digits}f}"


def scale_points(
    points: Sequence[Tuple[float, float]],
    x_range: Tuple[float, float],
    y_range: Tuple[float, float],
) -> str:
    """Map data points onto the plot area as an SVG `points` attribute.

    Args:
        points: The `(x, y)` data points
        x_range: The data range shown on the x axis
        y_range: The data range shown on the y axis

    Returns:
        Space separated `x,y` pixel coordinates (2 decimals)
    """
    (x0, x1), (y0, y1) = x_range, y_range
    width = PLOT_WIDTH - 2 * PLOT_MARGIN
    height = PLOT_HEIGHT - 2 * PLOT_MARGIN
    coords = []
    for x, y in points:
        px = PLOT_MARGIN + (x - x0) / ((x1 - x0) or 1) * width
        py = PLOT_HEIGHT - PLOT_MARGIN - (y - y0) / ((y1 - y0) or 1) * height
        coords.append(f"{px:.2f},{py:.2f}")
    return " ".join(coords)


def create_environment(
    templates_dirs: Optional[Union[Text, Path, List[Union[Text, Path]]]] = None,
) -> Environment:
    """Create the Jinja2 environment for rendering report templates.

    Templates in `templates_dirs` take precedence over the packaged ones, so
    the report layout can be customized without touching the package.

    Args:
        templates_dirs: The template directories

    Returns:
        Jinja2 template environment
    """

    if templates_dirs is None:
        templates_dirs = [Path("./templates")]

    env_loader = ChoiceLoader(
        [
            FileSystemLoader(templates_dirs),
            PackageLoader("rekd.snn", "templates"),
        ]
    )
    env = Environment(
        loader=env_loader,
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
        autoescape=False,
    )
    custom_filters = {
        "fixed": fixed,
        "signed": signed,
    }
    custom_globals = {
        "scale_points": scale_points,
        "plot_width": PLOT_WIDTH,
        "plot_height": PLOT_HEIGHT,
        "plot_margin": PLOT_MARGIN,
    }
    env.filters.update(custom_filters)
    env.globals.update(custom_globals)

    return env


def render_template(template: Text, variables: Dict[str, Any]) -> str:
    """Renders a named report template.

    Args:
        template: The template name (e.g., `comparison.txt.j2`)
        variables: The context variables to use for rendering

    Returns:
        The rendered template
    """
    env = create_environment()
    return env.get_template(template).render(**variables)


def write_template(template: Text, dest: Path, variables: Dict[str, Any]):
    """Render and write a report template.

    Args:
        template: The template name
        dest: The file to write the rendered string to
        variables: The variable context to use for rendering
    """
    with open(dest, "w") as dest_file:
        dest_file.write(render_template(template, variables))
