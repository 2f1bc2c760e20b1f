# bank_db.py

import logging
import os
import shutil
import sqlite3
from datetime import datetime
from typing import Iterable, Optional

import numpy as np

from errors import DataError
from migrations import run_migrations
from shape_labels import ShapeBank, ShapeBankEntry

logger = logging.getLogger(__name__)

BANK_FILENAME = 'shape_bank.db'


def default_path(data_root: str) -> str:
    return os.path.join(data_root, BANK_FILENAME)


def setup_database(path: str) -> str:
    """
    Create the database file if needed, the version table, and apply pending migrations.
    """
    db_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(db_dir, exist_ok=True)

    conn = sqlite3.connect(path)
    try:
        cursor = conn.cursor()
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS db_version (
                version INTEGER PRIMARY KEY,
                last_updated TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')
        cursor.execute('INSERT INTO db_version (version) SELECT 0 WHERE NOT EXISTS (SELECT 1 FROM db_version)')
        run_migrations(conn)
        conn.commit()
    except Exception as e:
        logger.error(f"Error setting up shape bank database {path}: {e}", exc_info=True)
        conn.rollback()
        raise
    finally:
        conn.close()
    return path


def get_database_connection(path: str):
    """
    Connection with dict rows. Raises DataError when the file is missing.
    """
    def dict_factory(cursor, row):
        fields = [column[0] for column in cursor.description]
        return {key: value for key, value in zip(fields, row)}

    if not os.path.exists(path):
        logger.error(f"Shape bank database not found: {path}")
        raise DataError(f"Shape bank database not found: {path}")
    conn = sqlite3.connect(path)
    conn.row_factory = dict_factory
    return conn


def _pack(points: np.ndarray) -> bytes:
    return np.ascontiguousarray(points, dtype='<f8').tobytes()


def _unpack(blob: bytes, num_points: int) -> np.ndarray:
    data = np.frombuffer(blob, dtype='<f8')
    if data.size != num_points * 3:
        raise DataError(f"Shape bank row holds {data.size} values, expected {num_points * 3}")
    return data.reshape(num_points, 3).astype(np.float64)


def save_entries(path: str, entries: Iterable[ShapeBankEntry], split: str = 'train') -> int:
    """Insert entries and set their ``entry_id``; returns the number written."""
    setup_database(path)
    conn = get_database_connection(path)
    written = 0
    try:
        cursor = conn.cursor()
        for entry in entries:
            l, w, h = entry.size
            cursor.execute(
                'INSERT INTO shape_bank (class_name, length, width, height, num_points, points, source, split) '
                'VALUES (?, ?, ?, ?, ?, ?, ?, ?)',
                (entry.class_name, float(l), float(w), float(h), entry.count, _pack(entry.points),
                 entry.source, split))
            entry.entry_id = cursor.lastrowid
            written += 1
        conn.commit()
    except Exception as e:
        conn.rollback()
        logger.error(f"Failed to write shape bank entries to {path}: {e}", exc_info=True)
        raise
    finally:
        conn.close()
    logger.info(f"Stored {written} shape bank entries in {path}")
    return written


def load_bank(path: str, class_name: Optional[str] = None, split: Optional[str] = 'train') -> ShapeBank:
    """Entries ordered by id, optionally filtered by class and split."""
    conn = get_database_connection(path)
    try:
        query = 'SELECT * FROM shape_bank WHERE 1 = 1'
        params = []
        if class_name is not None:
            query += ' AND class_name = ?'
            params.append(class_name)
        if split is not None:
            query += ' AND split = ?'
            params.append(split)
        rows = conn.execute(query + ' ORDER BY id', params).fetchall()
    except sqlite3.DatabaseError as e:
        logger.error(f"Failed to read shape bank {path}: {e}", exc_info=True)
        raise DataError(f"Failed to read shape bank {path}: {e}") from e
    finally:
        conn.close()
    bank = ShapeBank()
    for row in rows:
        bank.add(ShapeBankEntry(row['class_name'], (row['length'], row['width'], row['height']),
                                _unpack(row['points'], row['num_points']), row['id'], row['source'] or ''))
    logger.debug(f"Loaded {len(bank)} shape bank entries from {path}")
    return bank


def count_entries(path: str) -> dict:
    conn = get_database_connection(path)
    try:
        rows = conn.execute('SELECT class_name, COUNT(*) AS n FROM shape_bank GROUP BY class_name').fetchall()
    finally:
        conn.close()
    return {row['class_name']: row['n'] for row in rows}


def backup_database(path: str):
    """Create a timestamped backup of the database."""
    if not os.path.exists(path):
        return False

    backup_dir = os.path.join(os.path.dirname(os.path.abspath(path)), 'backups')
    os.makedirs(backup_dir, exist_ok=True)

    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    backup_path = os.path.join(backup_dir, f'shape_bank_{timestamp}.db')

    try:
        shutil.copy2(path, backup_path)
        return backup_path
    except OSError as e:
        logger.error(f"Failed to create shape bank backup: {e}")
        return False
