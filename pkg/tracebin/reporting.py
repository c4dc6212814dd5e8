"""Summary tables and their exports.

The overall table counts, per tool, how many targets fall in each error
bucket plus the total number of instruction errors; the control-flow table
splits missed instructions by the kind of transfer that leads into them.
"""

import csv
import io
import json
import logging
from collections import defaultdict

from django.conf import settings
from django.db.models import Count, Q, Sum

from .evaluator import BUCKET_LABELS
from .exceptions import EvaluationError

logger = logging.getLogger(__name__)

# For Excel
try:
    from openpyxl import Workbook
    from openpyxl.styles import Font, PatternFill
    EXCEL_AVAILABLE = True
except ImportError:
    EXCEL_AVAILABLE = False

# For PDF
try:
    from reportlab.lib import colors
    from reportlab.lib.pagesizes import letter
    from reportlab.lib.styles import ParagraphStyle
    from reportlab.platypus import Paragraph, SimpleDocTemplate, Table, TableStyle
    PDF_AVAILABLE = True
except ImportError:
    PDF_AVAILABLE = False

OVERALL_COLUMNS = ['tool', *BUCKET_LABELS, 'T', 'targets', 'failed']
CONTROLFLOW_COLUMNS = ['tool', 'cbr', 'indirect', 'direct', 'return', 'unattributed']
FORMATS = ('table', 'csv', 'json', 'excel', 'pdf')
EXTENSIONS = {'table': 'txt', 'csv': 'csv', 'json': 'json', 'excel': 'xlsx', 'pdf': 'pdf'}


def overall_rows(results):
    """results: iterable of EntryResult"""
    rows = {}
    for result in results:
        row = rows.setdefault(result.tool, dict.fromkeys(OVERALL_COLUMNS[1:], 0))
        if result.error:
            row['failed'] += 1
            continue
        row[result.summary['bucket']] += 1
        row['T'] += result.summary['total']
        row['targets'] += 1
    return [{'tool': tool, **rows[tool]} for tool in sorted(rows)]


def controlflow_rows(results):
    rows = defaultdict(lambda: dict.fromkeys(CONTROLFLOW_COLUMNS[1:], 0))
    for result in results:
        if result.error:
            continue
        row = rows[result.tool]
        for key, value in result.categories.items():
            row[key] += value
    return [{'tool': tool, **rows[tool]} for tool in sorted(rows)]


def ledger_rows(batch=None):
    """Both tables aggregated from the evaluation ledger, optionally for one batch"""
    from .models import EvaluationRecord

    records = EvaluationRecord.objects.all()
    if batch is not None:
        records = records.filter(batch=batch)

    bucket_counts = {
        label: Count('id', filter=Q(status='ok', bucket=label)) for label in BUCKET_LABELS
    }
    overall = records.values('tool').annotate(
        **bucket_counts,
        T=Sum('total_errors', filter=Q(status='ok')),
        targets=Count('id', filter=Q(status='ok')),
        failed=Count('id', filter=Q(status='failed')),
    ).order_by('tool')
    controlflow = records.filter(status='ok').values('tool').annotate(
        cbr=Sum('cbr_count'),
        indirect=Sum('indirect_count'),
        direct=Sum('direct_count'),
        ret=Sum('return_count'),
        unattributed=Sum('unattributed_count'),
    ).order_by('tool')

    overall_table = [
        {'tool': row['tool'], **{column: row[column] or 0 for column in OVERALL_COLUMNS[1:]}}
        for row in overall
    ]
    controlflow_table = [
        {
            'tool': row['tool'],
            'cbr': row['cbr'] or 0,
            'indirect': row['indirect'] or 0,
            'direct': row['direct'] or 0,
            'return': row['ret'] or 0,
            'unattributed': row['unattributed'] or 0,
        }
        for row in controlflow
    ]
    return overall_table, controlflow_table


def generate_csv_stream(output, data, title):
    """Write rows as CSV to a stream"""
    if data:
        writer = csv.DictWriter(output, fieldnames=list(data[0].keys()), lineterminator='\n')
        writer.writeheader()
        writer.writerows(data)
    else:
        output.write(f"# no rows for {title}\n")


def render_table(data, title=None):
    if not data:
        return f"No rows for {title}.\n" if title else "No rows.\n"
    headers = list(data[0].keys())
    cells = [[str(row[h]) for h in headers] for row in data]
    widths = [max(len(h), *(len(line[i]) for line in cells)) for i, h in enumerate(headers)]
    lines = []
    if title:
        lines.append(title)
    lines.append('  '.join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths))))
    lines.append('  '.join('-' * w for w in widths))
    for line in cells:
        lines.append('  '.join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))))
    return '\n'.join(lines) + '\n'


def generate_json(data):
    return json.dumps(data, indent=2, sort_keys=False) + '\n'


def generate_excel(file_path, data, title):
    """Generate Excel file (requires openpyxl)"""
    wb = Workbook()
    ws = wb.active
    ws.title = title.replace('_', ' ').title()[:31]

    if data:
        headers = list(data[0].keys())
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=1, column=col, value=header)
            cell.font = Font(bold=True)
            cell.fill = PatternFill(start_color="CCCCCC", end_color="CCCCCC", fill_type="solid")
        for row_idx, row_data in enumerate(data, 2):
            for col, value in enumerate(row_data.values(), 1):
                ws.cell(row=row_idx, column=col, value=value)
        numeric = [col for col, header in enumerate(headers, 1) if header != 'tool']
        if len(data) > 1 and numeric:
            total_row = len(data) + 2
            ws.cell(row=total_row, column=1, value="Total").font = Font(bold=True)
            for col in numeric:
                first = ws.cell(row=2, column=col).coordinate
                last = ws.cell(row=total_row - 1, column=col).coordinate
                ws.cell(row=total_row, column=col, value=f"=SUM({first}:{last})").font = Font(bold=True)
    else:
        ws.cell(row=1, column=1, value=f"No rows for {title}.")
    wb.save(file_path)


def generate_pdf(file_path, data, title, subtitle=''):
    """Generate PDF file with a grid table (requires reportlab)"""
    doc = SimpleDocTemplate(file_path, pagesize=letter)
    elements = [Paragraph(title, ParagraphStyle(name='Title', fontSize=14, spaceAfter=10))]
    if subtitle:
        elements.append(Paragraph(subtitle, ParagraphStyle(name='Subtitle', fontSize=10, spaceAfter=20)))

    limit = settings.TRACEBIN_REPORT_ROW_LIMIT
    if data:
        headers = list(data[0].keys())
        table_data = [headers]
        for row in data[:limit]:
            table_data.append([str(v)[:50] for v in row.values()])

        table = Table(table_data)
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, 0), 10),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 12),
            ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
            ('GRID', (0, 0), (-1, -1), 1, colors.black),
        ]))
        elements.append(table)
        if len(data) > limit:
            elements.append(Paragraph(f"{len(data) - limit} more rows omitted.", ParagraphStyle(name='Note', fontSize=8)))
    else:
        elements.append(Paragraph(f"No rows for {title}.", ParagraphStyle(name='Empty', fontSize=10)))

    logger.info(f"PDF generated with {len(data)} rows")
    doc.build(elements)


def render(data, fmt, title):
    """Text forms of a table: table, csv or json"""
    if fmt == 'table':
        return render_table(data, title)
    if fmt == 'csv':
        output = io.StringIO()
        generate_csv_stream(output, data, title)
        return output.getvalue()
    if fmt == 'json':
        return generate_json(data)
    raise EvaluationError(f"{fmt} is not a text format")


def export(data, fmt, path_stem, title, subtitle=''):
    """Write a table next to path_stem with the format's extension; returns the path.

    Excel and PDF fall back to CSV when their libraries are missing.
    """
    if fmt not in FORMATS:
        raise EvaluationError(f"unknown report format {fmt!r}")
    if fmt == 'excel' and not EXCEL_AVAILABLE or fmt == 'pdf' and not PDF_AVAILABLE:
        logger.warning(f"{fmt} export unavailable, writing CSV instead")
        fmt = 'csv'
    path = f"{path_stem}.{EXTENSIONS[fmt]}"
    if fmt == 'excel':
        generate_excel(path, data, title)
    elif fmt == 'pdf':
        generate_pdf(path, data, title, subtitle)
    else:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(render(data, fmt, title))
    logger.info(f"Wrote {title} ({len(data)} rows) to {path}")
    return path
