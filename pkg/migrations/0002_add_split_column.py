"""Record which dataset split an entry was harvested from."""


def upgrade(conn):
    cursor = conn.cursor()

    cursor.execute('PRAGMA table_info(shape_bank)')
    columns = [col[1] for col in cursor.fetchall()]

    if 'split' not in columns:
        cursor.execute('''
            ALTER TABLE shape_bank
            ADD COLUMN split TEXT DEFAULT 'train'
        ''')

    cursor.execute('''
        UPDATE db_version SET version = 2, last_updated = CURRENT_TIMESTAMP;
    ''')

    conn.commit()
