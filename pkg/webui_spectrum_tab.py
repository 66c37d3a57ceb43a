import gradio as gr


def create_spectrum_tab(studio):
    """Create the filter function tab interface"""
    configs = studio.available_configs()
    with gr.Row():
        config = gr.Dropdown(
            label="Run Configuration",
            choices=configs,
            value=configs[0] if configs else None,
            allow_custom_value=True
        )
        pulse = gr.Textbox(
            label="Pulse File",
            placeholder="path to pulse.json, or 'original'",
            value="original"
        )
        noise = gr.Textbox(
            label="Noise Channel",
            placeholder="blank selects the first time-dependent channel"
        )

    spectrum_btn = gr.Button(
        value="Compute Filter Function",
        variant="primary"
    )

    spectrum_output = gr.Textbox(
        label="Output Status",
        show_copy_button=True,
        lines=10
    )

    spectrum_btn.click(
        fn=lambda cfg, p, n: studio.process_filter_function(cfg, p, n or None),
        inputs=[config, pulse, noise],
        outputs=spectrum_output,
        show_progress="full"
    )

    gr.Markdown("""
    ### Filter Function
    Writes `filter_function.csv` with columns `omega_rad_s, F, S, S_F_over_w2` on a
    log-spaced grid and prints the fidelity predicted by the spectral overlap of the
    channel's noise spectrum with the filter function.
    """)
