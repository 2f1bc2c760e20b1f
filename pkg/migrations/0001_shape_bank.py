"""
Shape bank table: one canonical surface sampling per row.
"""


def upgrade(conn):
    cursor = conn.cursor()

    cursor.execute('''
        CREATE TABLE IF NOT EXISTS shape_bank (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            class_name TEXT NOT NULL,
            length REAL NOT NULL,
            width REAL NOT NULL,
            height REAL NOT NULL,
            num_points INTEGER NOT NULL,
            points BLOB NOT NULL,
            source TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
    ''')

    cursor.execute('''
        CREATE INDEX IF NOT EXISTS idx_shape_bank_class ON shape_bank(class_name);
    ''')

    cursor.execute('''
        UPDATE db_version SET version = 1, last_updated = CURRENT_TIMESTAMP;
    ''')

    conn.commit()
