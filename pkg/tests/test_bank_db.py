import os
import sqlite3

import numpy as np
import pytest

import bank_db
from errors import DataError
from migrations import get_migration_files, run_migrations
from shape_labels import ShapeBankEntry


def entry(class_name, size, rng, source='000001:0', count=20):
    return ShapeBankEntry(class_name, size, rng.normal(size=(count, 3)), source=source)


@pytest.fixture
def db_path(tmp_path):
    return str(tmp_path / 'bank' / bank_db.BANK_FILENAME)


def test_setup_applies_every_migration_once(db_path):
    bank_db.setup_database(db_path)
    bank_db.setup_database(db_path)
    conn = sqlite3.connect(db_path)
    try:
        applied = [row[0] for row in conn.execute('SELECT version FROM _migrations ORDER BY version')]
        version = conn.execute('SELECT version FROM db_version').fetchone()[0]
        columns = [row[1] for row in conn.execute('PRAGMA table_info(shape_bank)')]
    finally:
        conn.close()
    assert applied == get_migration_files() == ['0001_shape_bank', '0002_add_split_column']
    assert version == 2
    assert 'split' in columns
    assert run_migrations(sqlite3.connect(db_path)) == []


def test_entries_survive_storage(db_path, rng):
    stored = [entry('Car', (3.9, 1.6, 1.56), rng), entry('Car', (4.2, 1.7, 1.5), rng, '000002:1')]
    assert bank_db.save_entries(db_path, stored) == 2
    assert [e.entry_id for e in stored] == [1, 2]
    bank = bank_db.load_bank(db_path)
    assert len(bank) == 2
    assert np.array_equal(bank.entries[0].points, stored[0].points)
    assert bank.entries[1].size == (4.2, 1.7, 1.5)
    assert bank.entries[1].source == '000002:1'


def test_filters_by_class_and_split(db_path, rng):
    bank_db.save_entries(db_path, [entry('Car', (3.9, 1.6, 1.56), rng), entry('Cyclist', (1.8, 0.6, 1.7), rng)])
    bank_db.save_entries(db_path, [entry('Car', (4.0, 1.6, 1.5), rng)], split='val')
    assert len(bank_db.load_bank(db_path, 'Car')) == 1
    assert len(bank_db.load_bank(db_path, 'Car', split=None)) == 2
    assert len(bank_db.load_bank(db_path, split='val')) == 1
    assert bank_db.count_entries(db_path) == {'Car': 2, 'Cyclist': 1}


def test_missing_database(tmp_path):
    with pytest.raises(DataError):
        bank_db.load_bank(str(tmp_path / 'missing.db'))


def test_corrupt_row_is_reported(db_path, rng):
    bank_db.save_entries(db_path, [entry('Car', (3.9, 1.6, 1.56), rng)])
    conn = sqlite3.connect(db_path)
    conn.execute('UPDATE shape_bank SET num_points = 21')
    conn.commit()
    conn.close()
    with pytest.raises(DataError, match='expected 63'):
        bank_db.load_bank(db_path)


def test_backup(db_path, rng):
    assert bank_db.backup_database(db_path) is False
    bank_db.save_entries(db_path, [entry('Car', (3.9, 1.6, 1.56), rng)])
    backup = bank_db.backup_database(db_path)
    assert os.path.exists(backup)
    assert len(bank_db.load_bank(backup)) == 1
