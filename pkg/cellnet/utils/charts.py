import plotly.graph_objects as go
from plotly.subplots import make_subplots


def learning_curve_chart(history, title="MCA learning curves", template="plotly_white"):
    """
    MCA on training, validation and test sets per epoch, with the training
    loss and learning rate underneath.
    history: sequence of EpochRecord
    """
    if not history:
        return go.Figure()

    epochs = [r.epoch for r in history]

    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        vertical_spacing=0.06, subplot_titles=('MCA (%)', 'Training loss'),
                        row_heights=[0.65, 0.35],
                        specs=[[{}], [{"secondary_y": True}]])

    series = [
        ('Training', [r.train_mca for r in history], '#007AFF'),
        ('Validation', [r.validation_mca for r in history], '#FF2D55'),
        ('Test', [r.test_mca for r in history], '#34C759'),
    ]
    for name, values, color in series:
        if all(v is None for v in values):
            continue
        fig.add_trace(go.Scatter(
            x=epochs,
            y=[None if v is None else 100.0 * v for v in values],
            mode='lines+markers',
            name=name,
            line=dict(color=color, width=2)
        ), row=1, col=1)

    fig.add_trace(go.Scatter(
        x=epochs,
        y=[r.train_loss for r in history],
        mode='lines',
        name='Loss',
        line=dict(color='#666666', width=2)
    ), row=2, col=1)

    # learning-rate steps
    fig.add_trace(go.Scatter(
        x=epochs,
        y=[r.learning_rate for r in history],
        mode='lines',
        name='Learning rate',
        line=dict(color='#FF9500', width=1, dash='dash', shape='hv')
    ), row=2, col=1, secondary_y=True)

    fig.update_layout(
        title=title,
        template=template,
        height=600,
        margin=dict(l=20, r=20, t=60, b=20),
        xaxis2_title="Epoch",
        hovermode="x unified"
    )
    return fig


def confusion_heatmap(cm, title="Confusion matrix (%)", template="plotly_white"):
    """Row-normalized confusion matrix, true classes on rows"""
    pct = cm.percentages()
    fig = go.Figure(go.Heatmap(
        z=pct[::-1],
        x=cm.class_names,
        y=cm.class_names[::-1],
        text=[[f'{v:.2f}' for v in row] for row in pct[::-1]],
        texttemplate='%{text}',
        colorscale='Blues',
        zmin=0,
        zmax=100
    ))
    fig.update_layout(
        title=title,
        template=template,
        xaxis_title="Predicted",
        yaxis_title="True",
        height=550,
        margin=dict(l=20, r=20, t=60, b=20)
    )
    return fig
