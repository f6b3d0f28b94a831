use std::sync::Arc;

use parking_lot::RwLock;

/// A shared, hot-swappable value. Readers take a cheap snapshot; a writer
/// replaces the whole value.
#[derive(Debug)]
pub struct Live<T>(Arc<RwLock<Arc<T>>>);

impl<T> Clone for Live<T> {
    fn clone(&self) -> Self {
        Live(Arc::clone(&self.0))
    }
}

impl<T> Live<T> {
    pub fn new(value: T) -> Self {
        Live(Arc::new(RwLock::new(Arc::new(value))))
    }

    pub fn get(&self) -> Arc<T> {
        Arc::clone(&self.0.read())
    }

    pub fn replace(&self, value: T) -> Arc<T> {
        std::mem::replace(&mut *self.0.write(), Arc::new(value))
    }

    /// Read-modify-write under the write lock.
    pub fn update<R>(&self, f: impl FnOnce(&T) -> (T, R)) -> R {
        let mut guard = self.0.write();
        let (next, out) = f(&guard);
        *guard = Arc::new(next);
        out
    }
}
