#!/usr/bin/env python3
"""
Tube Linker Web API
===================
Flask JSON API over the linking, evaluation and scenario generation
operations. Files travel as JSON-lines text inside the request body.

Run with: python3 web_app.py
Then POST to: http://localhost:8080/api/link
"""

import logging

from flask import Flask, jsonify, request

from src.config_manager import ConfigManager, get_config
from src.core_model import InvariantError, ValidationError
from src.evaluation import evaluation_report
from src.proposal_ingest import (
    ground_truth_record,
    load_ground_truth,
    read_tubes,
    read_videos,
    tube_record,
    video_records,
)
from src.synthetic import ScenarioSpec, generate_scenario
from src.tube_builder import TubeLinker

logger = logging.getLogger(__name__)

app = Flask(__name__)

# Global instances
config = None


def init_app(config_path=None):
    """Initialize config."""
    global config
    try:
        config = get_config(ConfigManager.resolve_path(config_path))
        return True
    except (FileNotFoundError, ValidationError) as e:
        logger.error("Error initializing: %s", e)
        config = ConfigManager()
        return False


def _lines(data, key):
    value = data.get(key)
    if not isinstance(value, str):
        raise ValidationError("expected JSON-lines text", field=key)
    return value.splitlines()


def _request_json():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ValidationError("request body must be a JSON object")
    return data


@app.errorhandler(ValidationError)
def handle_validation_error(e):
    return jsonify({'success': False, 'error': str(e)}), 400


@app.errorhandler(InvariantError)
def handle_invariant_error(e):
    logger.exception("Invariant violated")
    return jsonify({'success': False, 'error': f"internal error: {e}"}), 500


# ============================================================================
# Routes - API
# ============================================================================

@app.route('/api/config')
def api_config():
    """Get the active configuration."""
    return jsonify({
        'success': True,
        'config_path': str(config.config_path) if config.config_path else None,
        'config': config.export_config()
    })


@app.route('/api/link', methods=['POST'])
def api_link():
    """Link proposals into tubes. Body: {"proposals": text, "overrides": {...}}."""
    data = _request_json()
    videos = read_videos(_lines(data, 'proposals'))

    local = ConfigManager()
    local.update({**config.export_config(), **(data.get('overrides') or {})})
    linker = TubeLinker(local.linker_config)

    tubes = [t for video_tubes in linker.link_videos(videos, threads=config.threads) for t in video_tubes]
    return jsonify({
        'success': True,
        'videos': len(videos),
        'tubes': [tube_record(t) for t in tubes]
    })


@app.route('/api/eval', methods=['POST'])
def api_eval():
    """Evaluate tubes. Body: {"tubes": text, "ground_truth": text, "no_localisation": bool}."""
    data = _request_json()
    class_names = config.class_names or None
    dets = read_tubes(_lines(data, 'tubes'), class_names)
    gts = load_ground_truth(_lines(data, 'ground_truth'), class_names)

    report = evaluation_report(dets, gts, config.eval_thresholds,
                               no_localisation=bool(data.get('no_localisation', False)))
    return jsonify({'success': True, 'report': report})


@app.route('/api/generate', methods=['POST'])
def api_generate():
    """Generate a synthetic scenario. Body: a scenario dictionary."""
    data = _request_json()
    spec = ScenarioSpec.from_dict(data)
    video, gts = generate_scenario(spec)

    return jsonify({
        'success': True,
        'proposals': video_records(video),
        'ground_truth': [ground_truth_record(gt) for gt in gts]
    })


# ============================================================================
# Main
# ============================================================================

init_app()

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)
    print("\n" + "="*50)
    print("TUBE LINKER WEB API")
    print("="*50)
    print(f"Config: {config.config_path or '(defaults)'}")
    print("="*50)
    print("\nStarting server at http://localhost:8080")
    print("Press Ctrl+C to stop\n")

    app.run(debug=False, host='0.0.0.0', port=8080)
